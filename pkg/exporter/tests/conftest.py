"""Offline fixtures: a tiny randomly-initialized causal transformer with a
word-level tokenizer, saved to disk so AutoModel/AutoTokenizer load it like
any published checkpoint."""

import os

import pytest

os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")
os.environ.setdefault("TOKENIZERS_PARALLELISM", "false")


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    import torch
    from tokenizers import Tokenizer, models, pre_tokenizers
    from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

    directory = tmp_path_factory.mktemp("tiny_model")
    torch.manual_seed(7)
    config = GPT2Config(
        vocab_size=100, n_positions=64, n_embd=32, n_layer=2, n_head=2,
        bos_token_id=None, eos_token_id=None,
    )
    model = GPT2LMHeadModel(config)
    model.eval()
    vocab = {f"tok{i}": i for i in range(96)}
    vocab.update({"<unk>": 96, "<pad>": 97})
    tok = Tokenizer(models.WordLevel(vocab, unk_token="<unk>"))
    tok.pre_tokenizer = pre_tokenizers.Whitespace()
    fast = PreTrainedTokenizerFast(tokenizer_object=tok, unk_token="<unk>", pad_token="<pad>")
    model.save_pretrained(directory)
    fast.save_pretrained(directory)
    return directory


@pytest.fixture(scope="session")
def prompts_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("prompts") / "prompts.txt"
    lines = [
        "tok1 tok5 tok9 tok13 tok2",
        "tok3 tok7 tok11 tok4",
        "tok8 tok2 tok6 tok10 tok14 tok0",
        "tok12 tok1 tok3",
        "tok5 tok5 tok5 tok9",
    ]
    path.write_text("\n".join(lines) + "\n")
    return path
