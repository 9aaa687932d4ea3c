"""Corpus directories: feature files plus a JSON manifest.

`gen-data` writes one feature file per utterance and a `manifest.json`
recording the generating spec and per-utterance speaker ids, which the
feature format itself does not carry. Training and evaluation read the
directory back without needing the latent factors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..frontend import (BOS_ID, Corpus, EOS_ID, FeatureBundle, SyntheticSpec,
                        load_features, save_features)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class CorpusDirError(ValueError):
    """A corpus directory or its manifest is malformed."""


@dataclass
class CorpusItem:
    """One training row: the features plus who spoke them."""

    bundle: FeatureBundle
    speaker_id: int


def spec_to_doc(spec: SyntheticSpec) -> dict:
    doc = asdict(spec)
    for k, v in doc.items():
        if isinstance(v, tuple):
            doc[k] = list(v)
    return doc


def spec_from_doc(doc: dict, where: str = "spec") -> SyntheticSpec:
    if not isinstance(doc, dict):
        raise CorpusDirError(f"{where} must be an object")
    fields = set(SyntheticSpec.__dataclass_fields__)
    unknown = sorted(set(doc) - fields)
    if unknown:
        raise CorpusDirError(f"{where}: unknown fields {unknown}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
    spec = SyntheticSpec(**kwargs)
    spec.validate()
    return spec


def corpus_items(corpus: Corpus) -> list[CorpusItem]:
    return [CorpusItem(bundle=u.bundle, speaker_id=u.speaker_id) for u in corpus.utterances]


def write_corpus_dir(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, utt in enumerate(corpus.utterances):
        fname = f"utt_{i:05d}.feat"
        save_features(out / fname, utt.bundle)
        rows.append({"file": fname, "speaker_id": int(utt.speaker_id)})
    manifest = {"format": MANIFEST_VERSION, "spec": spec_to_doc(corpus.spec), "items": rows}
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_corpus_dir(data_dir) -> tuple[SyntheticSpec, list[CorpusItem]]:
    root = Path(data_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise CorpusDirError(f"{root}: no {MANIFEST_NAME}; not a corpus directory")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise CorpusDirError(f"{manifest_path}: invalid JSON: {e}") from e
    for key in ("format", "spec", "items"):
        if key not in manifest:
            raise CorpusDirError(f"{manifest_path}: missing key {key!r}")
    if manifest["format"] != MANIFEST_VERSION:
        raise CorpusDirError(f"{manifest_path}: format {manifest['format']}, "
                             f"expected {MANIFEST_VERSION}")
    spec = spec_from_doc(manifest["spec"], where=f"{manifest_path}:spec")
    items = []
    for row in manifest["items"]:
        if "file" not in row or "speaker_id" not in row:
            raise CorpusDirError(f"{manifest_path}: item rows need 'file' and 'speaker_id'")
        bundle = load_features(root / row["file"])
        items.append(CorpusItem(bundle=bundle, speaker_id=int(row["speaker_id"])))
    if not items:
        raise CorpusDirError(f"{root}: corpus is empty")
    return spec, items


def reference_pairing(items: list[CorpusItem]) -> list[int]:
    """Deterministic reference index per item: the speaker's next utterance.

    Within each speaker's utterance list (in corpus order) every item
    points at the following one, wrapping around; a speaker with a single
    utterance references itself.
    """
    by_speaker: dict[int, list[int]] = {}
    for i, item in enumerate(items):
        by_speaker.setdefault(item.speaker_id, []).append(i)
    ref = [0] * len(items)
    for idxs in by_speaker.values():
        for pos, i in enumerate(idxs):
            ref[i] = idxs[(pos + 1) % len(idxs)]
    return ref


def text_ids_for(bundle: FeatureBundle) -> np.ndarray:
    """Symbol ids as the AR model consumes them.

    Bundle symbols already carry the begin/end marks, so they pass
    through unchanged; this is the training-side mirror of
    `Vocabulary.encode`.
    """
    ids = np.asarray(bundle.symbols, dtype=np.int64).reshape(-1)
    if ids.size < 2 or ids[0] != BOS_ID or ids[-1] != EOS_ID:
        raise ValueError("bundle symbols must start with the begin mark and end with the end mark")
    return ids
