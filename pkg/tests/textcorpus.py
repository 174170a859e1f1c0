"""Small labelled text corpus with a keyword signal, for pipeline tests.

Each document is two short sentences of filler words; exactly one
sentence carries a keyword owned by the document's class.  Embeddings are
random Gaussian vectors written in the usual whitespace text format.
"""

import json

import numpy as np

N_CLASSES = 5
CLASS_SHARES = (0.3, 0.2, 0.2, 0.15, 0.15)
KEYWORDS = [[f"key{c}x{k}" for k in range(3)] for c in range(N_CLASSES)]
FILLER = [f"w{k}" for k in range(40)]
PUNCT = [".", "!", "?"]


def make_records(n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.choice(N_CLASSES, size=n, p=CLASS_SHARES)
    out = []
    for c in labels:
        n_sent = 2
        hit = int(rng.integers(n_sent))
        sents = []
        for s in range(n_sent):
            words = list(rng.choice(FILLER, size=int(rng.integers(2, 4))))
            if s == hit:
                words.insert(int(rng.integers(len(words) + 1)), rng.choice(KEYWORDS[c]))
            words[0] = words[0].capitalize()
            sents.append(" ".join(words) + rng.choice(PUNCT))
        out.append({"text": " ".join(sents), "label": int(c) + 1})
    return out


def write_embeddings(path, d_emb, seed):
    rng = np.random.default_rng(seed)
    words = FILLER + [w for ks in KEYWORDS for w in ks] + PUNCT
    with open(path, "w", encoding="utf-8") as fh:
        for w in words:
            fh.write(w + " " + " ".join(repr(float(v)) for v in rng.standard_normal(d_emb)) + "\n")


def write_corpus(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
