"""Builds a tiny random RoBERTa checkpoint plus reference outputs.

The C++ encoder test loads the checkpoint and compares token ids and
first-token hidden states against what Hugging Face produces here.
Run from the repository root: python3 tools/make_roberta_fixture.py
"""
import json
import pathlib

import torch
from tokenizers import ByteLevelBPETokenizer
from transformers import RobertaConfig, RobertaModel, RobertaTokenizer

OUT = pathlib.Path("tests/fixtures/tiny_roberta")
CORPUS = [
    "Would you consider donating to Save the Children today?",
    "I'm not sure, money is tight this month and I have my own bills.",
    "Even a small donation of $0.50 can help a child in need.",
    "I feel really anxious about my exams and can't sleep.",
    "That sounds hard. It's okay to feel overwhelmed sometimes.",
    "The quick brown fox jumps over the lazy dog 1234567890.",
]
PROBES = [
    "Hello there!",
    "I'm worried about donating   twice.",
    "Café naïve résumé — emoji \U0001F600 ok",
    "Numbers 42 and 3.14, contractions we've they'll.",
    "x" * 40,
]


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    bpe = ByteLevelBPETokenizer()
    bpe.train_from_iterator(CORPUS * 4, vocab_size=400, min_frequency=2,
                            special_tokens=["<s>", "<pad>", "</s>", "<unk>", "<mask>"])
    bpe.save_model(str(OUT))

    torch.manual_seed(0)
    config = RobertaConfig(vocab_size=bpe.get_vocab_size(), hidden_size=32, num_hidden_layers=2,
                           num_attention_heads=4, intermediate_size=64, max_position_embeddings=66,
                           type_vocab_size=1, pad_token_id=1, bos_token_id=0, eos_token_id=2)
    model = RobertaModel(config, add_pooling_layer=False).eval()
    with torch.no_grad():
        for p in model.parameters():
            p.normal_(0.0, 0.2)
    model.save_pretrained(str(OUT), safe_serialization=True)

    tok = RobertaTokenizer(str(OUT / "vocab.json"), str(OUT / "merges.txt"))
    expected = []
    with torch.no_grad():
        for text in PROBES:
            ids = tok(text, truncation=True, max_length=64)["input_ids"]
            hidden = model(torch.tensor([ids])).last_hidden_state[0, 0]
            expected.append({"text": text, "ids": ids, "embedding": [float(v) for v in hidden]})
    (OUT / "expected.json").write_text(json.dumps(expected, indent=1, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main()
