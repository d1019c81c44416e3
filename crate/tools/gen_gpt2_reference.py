"""Record GPT-2 Small reference outputs for the optional fidelity check.

Usage: python tools/gen_gpt2_reference.py DIR

DIR must hold a published GPT-2 checkpoint in Hugging Face layout
(config.json, model.safetensors, vocab.json, merges.txt). The script writes
DIR/gpt2_reference.json with, for each of 20 fixture sentences, the token ids,
the greedy next-token id after every position, and per-token surprisal in nats
(None for the first token). Point ATTNSHIFT_GPT2_DIR at DIR to enable the check.
"""

import json
import os
import sys

import torch
from transformers import GPT2LMHeadModel, GPT2Tokenizer

FIX = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "tests", "fixtures")


def main():
    d = sys.argv[1]
    tok = GPT2Tokenizer(os.path.join(d, "vocab.json"), os.path.join(d, "merges.txt"))
    model = GPT2LMHeadModel.from_pretrained(d, torch_dtype=torch.float32).eval()
    with open(os.path.join(FIX, "sentences.txt"), encoding="utf-8") as f:
        texts = [line.rstrip("\n") for line in f][:20]

    cases = []
    for text in texts:
        ids = tok.encode(text)
        with torch.no_grad():
            logits = model(torch.tensor([ids])).logits[0].double()
        logp = torch.log_softmax(logits, dim=-1)
        surprisal = [None] + [float(-logp[i - 1, ids[i]]) for i in range(1, len(ids))]
        cases.append({
            "text": text,
            "ids": ids,
            "greedy_next": [int(i) for i in logits.argmax(-1)],
            "surprisal_nats": surprisal,
        })
    with open(os.path.join(d, "gpt2_reference.json"), "w", encoding="utf-8") as f:
        json.dump({"cases": cases}, f, ensure_ascii=False)


if __name__ == "__main__":
    main()
