"""Deterministic synthetic biomedical-flavored NER corpus from a small
generative grammar: three entity types over templated sentences. Used by the
end-to-end pipeline and its tests; real corpora plug in through the same
CoNLL files."""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import make_rng
from .corpus import LabeledSequence, write_conll

ENTITY_TYPES = ("Chemical", "Disease", "Gene")

_FILLERS = [
    "the", "a", "of", "in", "with", "was", "were", "and", "to", "for", "after",
    "before", "during", "showed", "observed", "reported", "treated", "received",
    "daily", "weekly", "study", "patients", "patient", "cohort", "group", "no",
    "mild", "severe", "cases", "controls", "levels", "baseline", "response",
    "therapy", "onset", "signs", "at", "on", "by", "improved", "worsened",
    "stable", "elevated", "reduced", "increased", "three", "four", "weeks",
    "relapse", "remission",
]

_ONSETS = ["br", "cl", "dr", "fl", "gr", "kr", "pl", "tr", "st", "sk", "sp",
           "vl", "m", "n", "l", "r", "s", "t", "k", "d", "p", "b", "g", "v",
           "z", "f", "th", "ph", "ch", "qu"]
_VOWELS = ["a", "e", "i", "o", "u", "ae", "io", "ou", "ei", "ua"]

_SUFFIXES = {
    "Disease": ["itis", "osis", "oma", "opathy", "algia", "emia", "plegia"],
    "Chemical": ["ine", "ol", "ate", "ide", "amide", "axel", "icin", "umab"],
    "Gene": ["ase", "in", "gen"],
}

_CONTINUATIONS = {
    "Disease": ["syndrome", "disorder", "sclerosis", "lesion", "deficiency",
                "carcinoma", "dystrophy", "neuropathy"],
    "Chemical": ["acid", "sodium", "chloride", "hydrate", "citrate",
                 "sulfate", "phosphate", "ester"],
    "Gene": ["kinase", "receptor", "homolog", "promoter", "ligand",
             "isoform", "subunit", "transporter"],
}

# templates: strings are filler words, entity-type names are slots
_TEMPLATES = [
    ["the", "patient", "with", "Disease", "received", "Chemical", "for", "three", "weeks"],
    ["expression", "of", "Gene", "was", "elevated", "in", "Disease", "cases"],
    ["Chemical", "therapy", "reduced", "Disease", "severity", "in", "the", "cohort"],
    ["no", "signs", "of", "Disease", "were", "observed", "after", "Chemical", "treatment"],
    ["Gene", "and", "Gene", "regulate", "the", "response", "to", "Chemical"],
    ["baseline", "levels", "of", "Chemical", "were", "stable", "during", "therapy"],
    ["patients", "treated", "with", "Chemical", "showed", "improved", "Disease", "outcomes"],
    ["mutations", "in", "Gene", "were", "reported", "in", "severe", "Disease"],
    ["the", "study", "observed", "mild", "Disease", "after", "Chemical", "exposure"],
    ["serum", "Chemical", "levels", "predicted", "Disease", "onset"],
    ["silencing", "of", "Gene", "worsened", "Disease", "in", "controls"],
    ["combined", "Chemical", "and", "Chemical", "therapy", "improved", "remission"],
    ["Gene", "activity", "was", "reduced", "by", "Chemical", "in", "the", "group"],
    ["the", "cohort", "showed", "no", "relapse", "during", "follow", "up"],
    ["patients", "in", "remission", "were", "observed", "weekly", "at", "baseline"],
    ["Disease", "was", "diagnosed", "before", "Gene", "testing", "was", "reported"],
    ["treatment", "with", "Chemical", "was", "stopped", "after", "Disease", "onset"],
    ["carriers", "of", "Gene", "variants", "developed", "Disease", "less", "often"],
]


def _make_stem(rng: np.random.Generator, syllables: int) -> str:
    parts = []
    for _ in range(syllables):
        parts.append(_ONSETS[rng.integers(0, len(_ONSETS))])
        parts.append(_VOWELS[rng.integers(0, len(_VOWELS))])
    return "".join(parts)


def _make_lexicons(rng: np.random.Generator, per_type: int = 160) -> dict[str, list[str]]:
    taken = set(_FILLERS)
    for words in _CONTINUATIONS.values():
        taken.update(words)
    lexicons: dict[str, list[str]] = {}
    for etype in ENTITY_TYPES:
        words: list[str] = []
        while len(words) < per_type:
            if etype == "Gene":
                word = _make_stem(rng, 2) + _SUFFIXES[etype][rng.integers(0, len(_SUFFIXES[etype]))]
                word += str(rng.integers(1, 10))
            else:
                n_syl = 2 + int(rng.integers(0, 2))
                word = _make_stem(rng, n_syl) + _SUFFIXES[etype][rng.integers(0, len(_SUFFIXES[etype]))]
            if word not in taken:
                taken.add(word)
                words.append(word)
        lexicons[etype] = words
    return lexicons


def _sentence(rng: np.random.Generator, lexicons: dict[str, list[str]]) -> LabeledSequence:
    template = _TEMPLATES[rng.integers(0, len(_TEMPLATES))]
    words: list[str] = []
    labels: list[str] = []
    for item in template:
        if item in ENTITY_TYPES:
            lex = lexicons[item]
            words.append(lex[rng.integers(0, len(lex))])
            labels.append(f"B-{item}")
            if rng.random() < 0.35:
                cont = _CONTINUATIONS[item]
                words.append(cont[rng.integers(0, len(cont))])
                labels.append(f"I-{item}")
        else:
            words.append(item)
            labels.append("O")
    return LabeledSequence(words, labels)


@dataclass
class SynthCorpus:
    dapt_text: list[list[str]]
    dapt_heldout: list[list[str]]
    train: list[LabeledSequence]
    dev: list[LabeledSequence]
    test: list[LabeledSequence]


def generate_corpus(
    seed: int = 42,
    n_dapt: int = 4000,
    n_heldout: int = 800,
    n_train: int = 4000,
    n_dev: int = 600,
    n_test: int = 600,
) -> SynthCorpus:
    lexicons = _make_lexicons(make_rng(seed, 90))
    rng = make_rng(seed, 91)

    def sample(n: int) -> list[LabeledSequence]:
        return [_sentence(rng, lexicons) for _ in range(n)]

    dapt = [s.words for s in sample(n_dapt)]
    heldout = [s.words for s in sample(n_heldout)]
    return SynthCorpus(dapt, heldout, sample(n_train), sample(n_dev), sample(n_test))


def write_corpus(corpus: SynthCorpus, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "dapt": out / "dapt.txt",
        "heldout": out / "dapt_heldout.txt",
        "train": out / "train.conll",
        "dev": out / "dev.conll",
        "test": out / "test.conll",
    }
    paths["dapt"].write_text(
        "\n".join(" ".join(s) for s in corpus.dapt_text) + "\n", encoding="utf-8")
    paths["heldout"].write_text(
        "\n".join(" ".join(s) for s in corpus.dapt_heldout) + "\n", encoding="utf-8")
    write_conll(paths["train"], corpus.train)
    write_conll(paths["dev"], corpus.dev)
    write_conll(paths["test"], corpus.test)
    return paths


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="generate the bundled synthetic NER corpus")
    parser.add_argument("--out", required=True)
    parser.add_argument("--seed", type=int, default=42)
    args = parser.parse_args(argv)
    corpus = generate_corpus(seed=args.seed)
    paths = write_corpus(corpus, args.out)
    for name, p in paths.items():
        print(f"{name}={p}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
