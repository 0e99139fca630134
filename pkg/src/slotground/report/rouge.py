from __future__ import annotations

from .text import tokenize


def lcs_length(a: list, b: list) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """ROUGE-L F1 over whitespace tokens (P = LCS/|cand|, R = LCS/|ref|)."""
    c, r = candidate.split(), reference.split()
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return 2 * p * rec / (p + rec)


def rouge_l_tokens(candidate: str, reference: str) -> float:
    """Same score after lower-casing and punctuation stripping."""
    return rouge_l(" ".join(tokenize(candidate)), " ".join(tokenize(reference)))
