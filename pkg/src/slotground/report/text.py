"""Reasoning templates, tokenisation and the mean-pooled text feature."""
from __future__ import annotations

import re
from functools import lru_cache

import numpy as np

from ..numkit import Tensor, constant, matmul, param
from ..vocab import N_CELLS, NONE_TYPE, QUALIFIERS, TYPE_VOCAB
from .schema import LocationSpec, Report

TEMPLATES = {
    "scratch": "thin linear groove with scratch marks along the {loc} area",
    "dent": "local depression and dent deformation in the {loc} area",
    "contamination": "foreign residue and contamination stain on the {loc} area",
    "missing-part": "absent material where a missing part leaves a void in the {loc} area",
    NONE_TYPE: "uniform texture and intact geometry with no anomaly cues",
}

_PUNCT = re.compile(r"[^\w\-\.]+")


def render_reasoning(template_type: str, location: str) -> str:
    return TEMPLATES[template_type].format(loc=location)


def tokenize(text: str) -> list[str]:
    """Lower-cased whitespace tokens with surrounding punctuation stripped."""
    out = []
    for tok in text.lower().split():
        tok = _PUNCT.sub("", tok).strip(".")
        if tok:
            out.append(tok)
    return out


@lru_cache(maxsize=1)
def text_vocab() -> tuple:
    words = set()
    for t in TYPE_VOCAB:
        words.update(tokenize(t))
    for cell in range(N_CELLS):
        for q in QUALIFIERS + (None,):
            loc = str(LocationSpec.from_cell(cell, q))
            words.update(tokenize(loc))
            for t in TYPE_VOCAB:
                words.update(tokenize(render_reasoning(t, loc)))
    return tuple(sorted(words))


def token_ids(tokens: list[str]) -> list[int]:
    vocab = text_vocab()
    index = {w: i for i, w in enumerate(vocab)}
    oov = len(vocab)
    return [index.get(t, oov) for t in tokens]


def init_text_embedding(rng, width: int) -> dict:
    """Per-token embeddings; the final row is the shared out-of-vocabulary vector."""
    return {"text.embed": param(rng.normal(0.0, 1.0, (len(text_vocab()) + 1, width)))}


def report_tokens(r: Report) -> list[str]:
    return tokenize(r.defect_type) + tokenize(r.defect_location) + tokenize(r.reasoning)


def pooling_matrix(reports) -> np.ndarray:
    """Row i averages the token embeddings of report i."""
    n_vocab = len(text_vocab()) + 1
    m = np.zeros((len(reports), n_vocab))
    for i, r in enumerate(reports):
        ids = token_ids(report_tokens(r))
        if not ids:
            raise ValueError(f"report {i} has an empty token stream")
        np.add.at(m[i], ids, 1.0 / len(ids))
    return m


def text_feature(r, embed: dict) -> Tensor:
    """Mean token embedding over DefectType, DefectLocation and Reasoning.

    Accepts a single report (returns a d-vector) or a list (returns n x d).
    """
    single = isinstance(r, Report)
    reports = [r] if single else list(r)
    t = matmul(constant(pooling_matrix(reports)), embed["text.embed"])
    return t[0] if single else t
