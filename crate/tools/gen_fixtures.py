#!/usr/bin/env python3
"""Regenerate the test fixtures under crates/core/tests/fixtures.

Everything here is computed with libraries that share no code with the Rust
crate: the toy BPE merges come from a small trainer in this file, reference
token ids from `transformers.GPT2Tokenizer`, the tiny model forward pass from
`transformers.GPT2LMHeadModel`, and the predictor values from a float64
numpy recomputation with EMD solved by `scipy.optimize.linprog`.

Usage: python3 tools/gen_fixtures.py
"""

import json
import math
import os
from collections import Counter

import numpy as np
import regex as re
import torch
from safetensors.torch import save_file
from scipy.optimize import linprog
from transformers import GPT2Config, GPT2LMHeadModel, GPT2Tokenizer

HERE = os.path.dirname(os.path.abspath(__file__))
FIX = os.path.join(HERE, "..", "crates", "core", "tests", "fixtures")

PAT = re.compile(r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+""")


def bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return bs, [chr(c) for c in cs]


def train_bpe(texts, vocab_size):
    bs, cs = bytes_to_unicode()
    b2u = dict(zip(bs, cs))
    words = Counter()
    for t in texts:
        for piece in PAT.findall(t):
            words[tuple(b2u[b] for b in piece.encode("utf-8"))] += 1
    vocab = {c: i for i, c in enumerate(cs)}
    merges = []
    n_merges = vocab_size - 256 - 1
    words = dict(words)
    while len(merges) < n_merges:
        pairs = Counter()
        for w, f in words.items():
            for a, b in zip(w, w[1:]):
                pairs[(a, b)] += f
        if not pairs:
            break
        best = max(pairs.items(), key=lambda kv: (kv[1], kv[0]))[0]
        merges.append(best)
        vocab[best[0] + best[1]] = len(vocab)
        new_words = {}
        for w, f in words.items():
            out = []
            k = 0
            while k < len(w):
                if k + 1 < len(w) and (w[k], w[k + 1]) == best:
                    out.append(w[k] + w[k + 1])
                    k += 2
                else:
                    out.append(w[k])
                    k += 1
            new_words[tuple(out)] = new_words.get(tuple(out), 0) + f
        words = new_words
    vocab["<|endoftext|>"] = len(vocab)
    return vocab, merges


def write_vocab(name, vocab, merges):
    d = os.path.join(FIX, name)
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, "vocab.json"), "w", encoding="utf-8") as f:
        json.dump(vocab, f, ensure_ascii=False)
    with open(os.path.join(d, "merges.txt"), "w", encoding="utf-8") as f:
        f.write("#version: 0.2\n")
        for a, b in merges:
            f.write(f"{a} {b}\n")
    return d


def randomize(model, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("ln_1.weight") or name.endswith("ln_2.weight") or name.endswith("ln_f.weight"):
                p.copy_(1.0 + 0.2 * torch.randn(p.shape, generator=g))
            elif p.dim() == 1:
                p.copy_(0.1 * torch.randn(p.shape, generator=g))
            else:
                p.copy_(0.35 * torch.randn(p.shape, generator=g))


def published_state_dict(model):
    out = {}
    for k, v in model.state_dict().items():
        if k.startswith("lm_head") or k.endswith(".attn.bias") or k.endswith(".attn.masked_bias"):
            continue
        out[k[len("transformer."):]] = v.detach().to(torch.float32).contiguous()
    return out


def ln(y, c, b, eps):
    m = y.mean(-1, keepdims=True)
    s = np.sqrt(((y - m) ** 2).mean(-1, keepdims=True) + eps)
    return (y - m) / s * c + b


def nae(w):
    i = len(w)
    if i <= 2:
        return None
    p = w[: i - 1] / w[: i - 1].sum()
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum() / math.log2(i - 1))


def emd_lp(prev, cur):
    i = len(cur)
    m, n = i - 1, i
    cost = np.array([[abs(r - s) / (i - 1) for s in range(n)] for r in range(m)]).ravel()
    a_eq = []
    b_eq = []
    for r in range(m):
        row = np.zeros(m * n)
        row[r * n:(r + 1) * n] = 1
        a_eq.append(row)
        b_eq.append(prev[r])
    for s in range(n - 1):
        col = np.zeros(m * n)
        col[s::n] = 1
        a_eq.append(col)
        b_eq.append(cur[s])
    res = linprog(cost, A_eq=np.array(a_eq), b_eq=np.array(b_eq), bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    assert res.success, res.message
    return float(res.fun)


def model_fixture(tok, vocab_size):
    cfg = GPT2Config(vocab_size=vocab_size, n_positions=64, n_embd=16, n_layer=2, n_head=2,
                     activation_function="gelu_new", layer_norm_epsilon=1e-5,
                     resid_pdrop=0.0, embd_pdrop=0.0, attn_pdrop=0.0)
    torch.manual_seed(0)
    cfg._attn_implementation = "eager"
    model = GPT2LMHeadModel(cfg)
    randomize(model, 20240607)
    model.eval()
    d = os.path.join(FIX, "tiny_model")
    os.makedirs(d, exist_ok=True)
    save_file(published_state_dict(model), os.path.join(d, "model.safetensors"))
    with open(os.path.join(d, "config.json"), "w") as f:
        json.dump({"n_layers": 2, "n_heads": 2, "d_model": 16, "vocab_size": vocab_size,
                   "max_context": 64, "ln_eps": 1e-5}, f, indent=2)

    with open(os.path.join(FIX, "sentences.txt"), encoding="utf-8") as f:
        text = " ".join(line.strip() for line in f.readlines()[:4])
    ids = tok.encode(text)[:40]
    x = torch.tensor([ids])

    out32 = model(x, output_attentions=True)
    logits32 = out32.logits[0].detach().numpy().astype(np.float64)

    m64 = model.double()
    captured = {}
    top = m64.transformer.h[-1]
    h1 = top.attn.register_forward_hook(lambda mod, inp, out: captured.__setitem__("o", out[0].detach()))
    out = m64(x, output_attentions=True, output_hidden_states=True)
    h1.remove()
    logits = out.logits[0].detach().numpy()
    attn = out.attentions[-1][0].detach().numpy()  # H x n x n
    x_in = out.hidden_states[-2][0].detach().numpy()  # input to the top block
    o = captured["o"][0].numpy()

    H = cfg.n_head
    dm = cfg.n_embd
    dh = dm // H
    eps = cfg.layer_norm_epsilon
    sd = {k: v.detach().numpy() for k, v in top.state_dict().items()}
    xp = ln(x_in, sd["ln_1.weight"], sd["ln_1.bias"], eps)
    qkv = xp @ sd["attn.c_attn.weight"] + sd["attn.c_attn.bias"]
    val = qkv[:, 2 * dm:]
    wo = sd["attn.c_proj.weight"]
    bo = sd["attn.c_proj.bias"]
    c_out, b_out = sd["ln_2.weight"], sd["ln_2.bias"]

    n = len(ids)
    v = np.zeros((H, n, dm))
    for h in range(H):
        v[h] = val[:, h * dh:(h + 1) * dh] @ wo[h * dh:(h + 1) * dh, :] + bo / H
    y = o + x_in
    s_y = np.sqrt(((y - y.mean(-1, keepdims=True)) ** 2).mean(-1) + eps)

    weights = {"w": {}, "n": {}, "rln": {}}
    for h in range(H):
        for i in range(1, n + 1):
            a = attn[h, i - 1, :i]
            weights["w"][(h, i)] = a
            nv = np.linalg.norm(v[h, :i], axis=1) * a
            weights["n"][(h, i)] = nv / nv.sum()
            cols = v[h, :i].copy()
            cols[i - 1] = cols[i - 1] + x_in[i - 1] / (H * a[i - 1])
            g = (cols - cols.mean(-1, keepdims=True)) / s_y[i - 1] * c_out + b_out / H
            nr = np.linalg.norm(g, axis=1) * a
            weights["rln"][(h, i)] = nr / nr.sum()

    preds = {}
    for form, wv in weights.items():
        per_measure = {"nae": [], "dnae": [], "md": [], "emd": []}
        for i in range(1, n + 1):
            vals = {"nae": [], "dnae": [], "md": [], "emd": []}
            for h in range(H):
                cur = wv[(h, i)]
                cn = nae(cur)
                vals["nae"].append(cn)
                if i >= 2:
                    prev = wv[(h, i - 1)]
                    pn = nae(prev)
                    vals["dnae"].append(None if cn is None or pn is None else abs(cn - pn))
                    padded = np.append(prev, 0.0)
                    vals["md"].append(float(np.abs(cur - padded).sum()))
                    vals["emd"].append(emd_lp(prev, cur))
                else:
                    for k in ("dnae", "md", "emd"):
                        vals[k].append(None)
            for k, hv in vals.items():
                per_measure[k].append(None if any(z is None for z in hv) else float(np.mean(hv)))
        preds[form] = per_measure

    def surprisal(lg):
        ls = lg - lg.max(-1, keepdims=True)
        lp = ls - np.log(np.exp(ls).sum(-1, keepdims=True))
        return [None] + [float(-lp[k - 1, ids[k]]) for k in range(1, n)]

    fixture = {
        "ids": ids,
        "layer": cfg.n_layer - 1,
        "greedy_next": [int(t) for t in logits.argmax(-1)],
        "logits_f64_rows": [logits[r].tolist() for r in range(3)],
        "logits_f32_rows": [logits32[r].tolist() for r in range(3)],
        "surprisal_nats_f64": surprisal(logits),
        "surprisal_nats_f32": surprisal(logits32),
        "top_attention": attn.tolist(),
        "o_top": o.tolist(),
        "x_top": x_in.tolist(),
        "predictors_head_mean": preds,
        "attn_n": {f"{h}:{i}": weights["n"][(h, i)].tolist() for h in range(H) for i in range(1, n + 1)},
        "attn_rln": {f"{h}:{i}": weights["rln"][(h, i)].tolist() for h in range(H) for i in range(1, n + 1)},
    }
    with open(os.path.join(FIX, "tiny_model_reference.json"), "w") as f:
        json.dump(fixture, f)


def main():
    with open(os.path.join(FIX, "sentences.txt"), encoding="utf-8") as f:
        sentences = [line.rstrip("\n") for line in f]
    with open(os.path.join(FIX, "train_extra.txt"), encoding="utf-8") as f:
        extra = [line.rstrip("\n") for line in f]
    corpus = sentences + extra

    for name, size in (("toy300", 300), ("toy1000", 1000)):
        vocab, merges = train_bpe(corpus, size)
        assert len(vocab) == size, (name, len(vocab))
        write_vocab(name, vocab, merges)

    d = os.path.join(FIX, "toy1000")
    tok = GPT2Tokenizer(os.path.join(d, "vocab.json"), os.path.join(d, "merges.txt"))
    probe = sentences + [
        "  leading spaces and trailing   ",
        "tabs\tand\nnewlines\n\nin  between",
        "emoji 🦀 and CJK 漢字 mixed with café",
        "it's they'd we'll you're I'm she's we've",
        "1234567890 3.14159 -42 +7",
    ]
    ref = {
        "texts": probe,
        "ids": [tok.encode(t) for t in probe],
        "joined_text": "\n".join(sentences),
        "joined_ids": tok.encode("\n".join(sentences)),
    }
    with open(os.path.join(FIX, "tokenizer_reference.json"), "w", encoding="utf-8") as f:
        json.dump(ref, f, ensure_ascii=False)

    model_fixture(tok, 1000)


if __name__ == "__main__":
    main()
