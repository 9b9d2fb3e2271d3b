"""A trained extractor together with its downstream heads, and its on-disk form."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import ANSWERS, COLORS, HPOS, N_CLASSES, QUESTIONS, SHAPES, SIZES, as_arrays, synth_dataset
from .extractors import FeatureExtractor, InvertibleExtractor, PlainCnnExtractor, train_extractor_with_head
from .heads import BOS, EOS, ClassifierHead, QaHead, SeqDecoderHead

log = logging.getLogger(__name__)

CAPTION_VOCAB = (BOS, EOS) + SIZES + COLORS + SHAPES + HPOS

# (class, constructor params, default training-set size, Adam lr)
ARCHITECTURES = {
    "plain": (PlainCnnExtractor, {"input_shape": (32, 32, 3)}, 1000, 2e-3),
    "plain-byte": (PlainCnnExtractor, {"input_shape": (32, 32, 3), "input_range": "byte"}, 1000, 2e-3),
    "invertible": (InvertibleExtractor, {"input_shape": (16, 16, 3)}, 3000, 1e-3),
}


@dataclass
class ModelBundle:
    extractor: FeatureExtractor
    classifier: ClassifierHead
    decoder: SeqDecoderHead | None = None
    qa: QaHead | None = None
    meta: dict = field(default_factory=dict)

    @property
    def image_size(self) -> int:
        return int(self.extractor.input_shape[0])

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        ex = self.extractor
        params = {k: list(v) if isinstance(v, tuple) else v for k, v in ex.get_params().items()}
        meta = dict(self.meta)
        meta.update({
            "extractor_class": type(ex).__name__,
            "extractor_params": params,
            "n_classes": self.classifier.n_classes,
            "heads": [name for name in ("decoder", "qa") if getattr(self, name) is not None],
        })
        checkpoint.save_tensors(ex.get_weights(), d / "extractor.mimw")
        checkpoint.save_tensors([p.data for p in self.classifier.parameters()], d / "classifier.mimw")
        if self.decoder is not None:
            checkpoint.save_tensors(self.decoder.parameters(), d / "decoder.mimw")
            checkpoint.save_vocab(self.decoder.vocab, d / "vocab.txt")
            meta["decoder_max_len"] = self.decoder.max_len
        if self.qa is not None:
            checkpoint.save_tensors(self.qa.parameters(), d / "qa.mimw")
            checkpoint.save_vocab(ANSWERS, d / "answers.txt")
        with open(d / "meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "ModelBundle":
        d = Path(directory)
        if not (d / "meta.json").is_file() or not (d / "extractor.mimw").is_file():
            raise FileNotFoundError(f"no model checkpoint in {d}")
        with open(d / "meta.json", encoding="utf-8") as fh:
            meta = json.load(fh)
        klass = {"PlainCnnExtractor": PlainCnnExtractor, "InvertibleExtractor": InvertibleExtractor}[
            meta["extractor_class"]]
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["extractor_params"].items()}
        ex = klass(**params).set_weights(checkpoint.load_tensors(d / "extractor.mimw"))
        clf = ClassifierHead(n_classes=meta["n_classes"]).set_parameters(checkpoint.load_tensors(d / "classifier.mimw"))
        decoder = qa = None
        if "decoder" in meta["heads"]:
            vocab = tuple(checkpoint.load_vocab(d / "vocab.txt"))
            decoder = SeqDecoderHead(vocab=vocab, max_len=meta["decoder_max_len"])
            decoder.set_parameters(checkpoint.load_tensors(d / "decoder.mimw"))
        if "qa" in meta["heads"]:
            answers = checkpoint.load_vocab(d / "answers.txt")
            qa = QaHead(n_questions=len(QUESTIONS), n_answers=len(answers))
            qa.set_parameters(checkpoint.load_tensors(d / "qa.mimw"))
        bundle_meta = {k: v for k, v in meta.items()
                       if k not in ("extractor_class", "extractor_params", "n_classes", "heads")}
        return cls(ex, clf, decoder, qa, bundle_meta)


def train_bundle(arch: str = "plain", seed: int = 0, n_train: int | None = None, epochs: int = 20,
                 heads: tuple[str, ...] = ("caption", "vqa")) -> ModelBundle:
    """Train an extractor jointly with a classifier, then the other heads on frozen features."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    klass, params, default_n, lr = ARCHITECTURES[arch]
    n_train = default_n if n_train is None else n_train
    size = params["input_shape"][0]
    samples = synth_dataset(n_train, seed=seed + 1, size=size)
    X, y = as_arrays(samples)
    ex = klass(seed=seed, epochs=epochs, **params).initialize()
    clf = ClassifierHead(n_classes=N_CLASSES, seed=seed)
    history = train_extractor_with_head(ex, clf, X, y, epochs, seed=seed, lr=lr)
    log.info("extractor trained: accuracy %.3f", history["train_accuracy"])
    F = ex.transform(X)
    decoder = qa = None
    if "caption" in heads:
        decoder = SeqDecoderHead(vocab=CAPTION_VOCAB, seed=seed).fit(F, [s.tokens for s in samples])
    if "vqa" in heads:
        pairs = [(i, q, a) for i, s in enumerate(samples) for q, a in s.qa_pairs()]
        rows, qids, answers = (np.array(c) for c in zip(*pairs))
        qa = QaHead(n_questions=len(QUESTIONS), n_answers=len(ANSWERS), seed=seed).fit(F[rows], qids, answers)
    meta = {
        "arch": arch,
        "seed": seed,
        "n_train": n_train,
        "epochs": epochs,
        "train_accuracy": history["train_accuracy"],
        "initial_loss": history["initial_loss"],
        "epoch_loss": history["epoch_loss"],
    }
    return ModelBundle(ex, clf, decoder, qa, meta)
