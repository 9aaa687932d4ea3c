"""Synthetic speech-feature corpora, text symbols, and feature-file IO.

Real deployments would feed SSL speech embeddings, speaker-verification
frames, and mel spectrograms. Here a seeded generator fabricates all of
them from known latent factors (symbol templates, speaker latents, a
prosody walk) so that downstream models can be tested against ground
truth. Frame rate is uniform across all per-frame arrays.

Feature files are a little-endian binary container:

    magic   8 bytes  "PGPTFEAT"
    version u32      1
    count   u32      number of arrays
    per array: name_len u16, name utf-8, dtype u8 (0 = f32),
               rank u8, dims u64 * rank, raw row-major data

A bundle file stores exactly the six required arrays; `symbols` is
stored f32-cast (exact for any realistic id range).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .engine import Rng

MAGIC = b"PGPTFEAT"
FORMAT_VERSION = 1

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
N_RESERVED = 3

REQUIRED_ARRAYS = ("semantic", "acoustic", "speaker_frames", "speaker_global", "mel", "symbols")

_DTYPE_CODES = {0: np.dtype("<f4")}


class FeatureFileError(Exception):
    """Base class for feature-file parse failures."""


class MagicError(FeatureFileError):
    pass


class VersionError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class InvariantError(FeatureFileError):
    """Bundle-level consistency violation (names the offending arrays)."""


class UnknownSymbolError(KeyError):
    pass


# ---- text ---------------------------------------------------------------


class Vocabulary:
    """Maps text characters to integer symbol ids, reserving 0/1/2.

    Id 0 is padding, 1 begins a sequence, 2 ends it; content symbols
    start at 3 in alphabet order.
    """

    def __init__(self, alphabet: str):
        if len(set(alphabet)) != len(alphabet):
            raise ValueError("alphabet contains duplicate characters")
        self.alphabet = alphabet
        self._to_id = {ch: N_RESERVED + i for i, ch in enumerate(alphabet)}
        self._to_char = {i: ch for ch, i in self._to_id.items()}

    @property
    def size(self) -> int:
        return len(self.alphabet)

    def encode(self, text: str) -> np.ndarray:
        ids = [BOS_ID]
        for ch in text:
            if ch not in self._to_id:
                raise UnknownSymbolError(f"symbol {ch!r} not in vocabulary {self.alphabet!r}")
            ids.append(self._to_id[ch])
        ids.append(EOS_ID)
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids) -> str:
        chars = []
        for i in np.asarray(ids).tolist():
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            if i not in self._to_char:
                raise UnknownSymbolError(f"id {i} not in vocabulary of size {self.size}")
            chars.append(self._to_char[i])
        return "".join(chars)


def text_to_symbols(text: str, vocabulary: Vocabulary) -> np.ndarray:
    """BOS-framed integer symbol sequence; empty text gives [BOS, EOS]."""
    return vocabulary.encode(text)


def default_alphabet(vocab_size: int) -> str:
    base = "abcdefghijklmnopqrstuvwxyz .,!?-'0123456789"
    chars = []
    for ch in base:
        if ch not in chars:
            chars.append(ch)
    if vocab_size > len(chars):
        raise ValueError(f"built-in alphabet supports up to {len(chars)} symbols, asked for {vocab_size}")
    return "".join(chars[:vocab_size])


# ---- bundles --------------------------------------------------------------


@dataclass
class FeatureBundle:
    """One utterance worth of aligned features, all at the same frame rate."""

    semantic: np.ndarray        # (T, Ds) f32
    acoustic: np.ndarray        # (T, Da) f32
    speaker_frames: np.ndarray  # (T, Dsp) f32
    speaker_global: np.ndarray  # (Dg,) f32
    mel: np.ndarray             # (T, M) f32
    symbols: np.ndarray         # (N,) int64, BOS ... EOS

    @property
    def n_frames(self) -> int:
        return self.semantic.shape[0]

    def validate(self) -> None:
        lengths = {
            "semantic": self.semantic.shape[0],
            "acoustic": self.acoustic.shape[0],
            "speaker_frames": self.speaker_frames.shape[0],
            "mel": self.mel.shape[0],
        }
        if len(set(lengths.values())) != 1:
            detail = ", ".join(f"{k}={v}" for k, v in lengths.items())
            raise InvariantError(f"frame counts disagree: {detail}")
        for name in ("semantic", "acoustic", "speaker_frames", "mel"):
            arr = getattr(self, name)
            if arr.ndim != 2:
                raise InvariantError(f"array {name!r} must be rank 2, got rank {arr.ndim}")
        if self.speaker_global.ndim != 1:
            raise InvariantError(f"array 'speaker_global' must be rank 1, got rank {self.speaker_global.ndim}")
        for name in REQUIRED_ARRAYS:
            if not np.all(np.isfinite(np.asarray(getattr(self, name), dtype=np.float64))):
                raise InvariantError(f"array {name!r} contains non-finite values")


@dataclass
class Utterance:
    bundle: FeatureBundle
    speaker_id: int
    core_symbols: np.ndarray       # content ids, no BOS/EOS
    frame_symbols: np.ndarray      # (T,) symbol id emitting each frame
    durations: np.ndarray          # frames per core symbol


@dataclass
class SyntheticSpec:
    """Knobs for the fabricated corpus; defaults are the toy profile."""

    vocab_size: int = 32
    n_speakers: int = 4
    n_utterances: int = 32
    symbols_per_utterance: tuple[int, int] = (4, 6)
    frames_per_symbol: tuple[int, int] = (2, 3)
    semantic_dim: int = 64
    acoustic_dim: int = 64
    speaker_frame_dim: int = 64
    speaker_global_dim: int = 16
    mel_bins: int = 32
    prosody_dim: int = 2
    max_frames: int = 128
    noise_scale: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("vocab_size", "n_speakers", "n_utterances", "semantic_dim", "acoustic_dim",
                     "speaker_frame_dim", "speaker_global_dim", "mel_bins", "prosody_dim", "max_frames"):
            v = getattr(self, name)
            if not isinstance(v, int) or v <= 0:
                raise ValueError(f"SyntheticSpec.{name} must be a positive int, got {v!r}")
        for name in ("symbols_per_utterance", "frames_per_symbol"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"SyntheticSpec.{name} must be (lo, hi) with 1 <= lo <= hi, got {(lo, hi)}")
        if self.noise_scale < 0:
            raise ValueError("SyntheticSpec.noise_scale must be >= 0")
        worst = self.symbols_per_utterance[1] * self.frames_per_symbol[1]
        if worst > self.max_frames:
            raise ValueError(f"longest utterance ({worst} frames) exceeds max_frames={self.max_frames}")


@dataclass
class CorpusFactors:
    """Latent generators behind a corpus, kept for oracle-style tests."""

    symbol_templates: np.ndarray    # (V, Ds)
    speaker_latents: np.ndarray     # (S, dz)
    speaker_affine: np.ndarray      # (S, Da, q)
    speaker_bias: np.ndarray        # (S, Da)
    symbol_acoustic: np.ndarray     # (V, Da)
    speaker_frame_map: np.ndarray   # (Dsp, dz)
    speaker_global_map: np.ndarray  # (Dg, dz)
    mel_projection: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), np.float32))  # (M, Ds+Da)


@dataclass
class Corpus:
    spec: SyntheticSpec
    factors: CorpusFactors
    utterances: list = field(default_factory=list)

    def __len__(self):
        return len(self.utterances)


_LATENT_DIM = 16
_PROSODY_SMOOTH = 0.9


def _draw_factors(spec: SyntheticSpec, rng: Rng) -> CorpusFactors:
    v, s = spec.vocab_size, spec.n_speakers
    q, dz = spec.prosody_dim, _LATENT_DIM
    f32 = np.float32
    return CorpusFactors(
        symbol_templates=rng.spawn("templates").normal((v, spec.semantic_dim), dtype=f32),
        speaker_latents=rng.spawn("latents").normal((s, dz), dtype=f32),
        # Gentle gain on the prosody walk: the continuous trajectory should
        # colour the acoustic frames, not drown the speaker/symbol structure.
        speaker_affine=rng.spawn("affine").normal((s, spec.acoustic_dim, q), scale=0.25 / np.sqrt(q), dtype=f32),
        speaker_bias=rng.spawn("bias").normal((s, spec.acoustic_dim), scale=0.5, dtype=f32),
        symbol_acoustic=rng.spawn("sym_ac").normal((v, spec.acoustic_dim), scale=0.5, dtype=f32),
        speaker_frame_map=rng.spawn("fmap").normal((spec.speaker_frame_dim, dz), scale=1.0 / np.sqrt(dz), dtype=f32),
        speaker_global_map=rng.spawn("gmap").normal((spec.speaker_global_dim, dz), scale=1.0 / np.sqrt(dz), dtype=f32),
    )


def _prosody_walk(t: int, q: int, rng: Rng) -> np.ndarray:
    walk = np.empty((t, q), dtype=np.float32)
    walk[0] = rng.normal((q,), dtype=np.float32)
    steps = rng.normal((max(t - 1, 0), q), scale=0.3, dtype=np.float32)
    for i in range(1, t):
        walk[i] = _PROSODY_SMOOTH * walk[i - 1] + steps[i - 1]
    return walk


def make_utterance(spec: SyntheticSpec, factors: CorpusFactors, core_symbols: np.ndarray,
                   durations: np.ndarray, speaker_id: int, rng: Rng) -> Utterance:
    """Render one utterance from explicit symbols/durations (oracle hook).

    Semantic frames are per-symbol templates; acoustic frames are a
    speaker affine of a smoothed prosody walk plus a symbol component;
    speaker arrays derive from the speaker latent; mel is a fixed
    projection of the emitted semantic+acoustic frames.
    """
    core_symbols = np.asarray(core_symbols, dtype=np.int64)
    durations = np.asarray(durations, dtype=np.int64)
    if core_symbols.shape != durations.shape:
        raise ValueError(f"symbols/durations length mismatch: {core_symbols.shape} vs {durations.shape}")
    if core_symbols.size == 0:
        raise ValueError("utterance needs at least one symbol")
    lo, hi = N_RESERVED, N_RESERVED + spec.vocab_size
    if core_symbols.min() < lo or core_symbols.max() >= hi:
        raise ValueError(f"core symbols must lie in [{lo}, {hi})")
    if not 0 <= speaker_id < spec.n_speakers:
        raise ValueError(f"speaker_id {speaker_id} out of range [0, {spec.n_speakers})")

    frame_symbols = np.repeat(core_symbols, durations)
    t = frame_symbols.shape[0]
    if t > spec.max_frames:
        raise ValueError(f"utterance of {t} frames exceeds max_frames={spec.max_frames}")
    tmpl_idx = frame_symbols - N_RESERVED
    noise = spec.noise_scale

    semantic = factors.symbol_templates[tmpl_idx].copy()
    prosody = _prosody_walk(t, spec.prosody_dim, rng.spawn("prosody"))
    acoustic = (prosody @ factors.speaker_affine[speaker_id].T
                + factors.speaker_bias[speaker_id]
                + factors.symbol_acoustic[tmpl_idx])

    z = factors.speaker_latents[speaker_id]
    base_frame = factors.speaker_frame_map @ z
    ripple = 1.0 + 0.1 * np.sin(2 * np.pi * np.arange(t) / 16.0 + float(z[0]))
    speaker_frames = base_frame[None, :] * ripple[:, None].astype(np.float32)
    speaker_global = factors.speaker_global_map @ z

    if noise > 0:
        nrng = rng.spawn("noise")
        semantic = semantic + nrng.normal(semantic.shape, scale=noise, dtype=np.float32)
        acoustic = acoustic + nrng.normal(acoustic.shape, scale=noise, dtype=np.float32)
        speaker_frames = speaker_frames + nrng.normal(speaker_frames.shape, scale=noise, dtype=np.float32)

    mel = np.concatenate([semantic, acoustic], axis=1) @ factors.mel_projection.T

    bundle = FeatureBundle(
        semantic=semantic.astype(np.float32),
        acoustic=acoustic.astype(np.float32),
        speaker_frames=speaker_frames.astype(np.float32),
        speaker_global=speaker_global.astype(np.float32),
        mel=mel.astype(np.float32),
        symbols=np.concatenate([[BOS_ID], core_symbols, [EOS_ID]]).astype(np.int64),
    )
    bundle.validate()
    return Utterance(bundle=bundle, speaker_id=speaker_id, core_symbols=core_symbols,
                     frame_symbols=frame_symbols, durations=durations)


def generate_corpus(spec: SyntheticSpec) -> Corpus:
    """Fabricate `spec.n_utterances` utterances, speakers round-robin."""
    spec.validate()
    rng = Rng(spec.seed)
    mel_proj = rng.spawn("mel_proj").normal(
        (spec.mel_bins, spec.semantic_dim + spec.acoustic_dim),
        scale=1.0 / np.sqrt(spec.semantic_dim + spec.acoustic_dim), dtype=np.float32)
    factors = _draw_factors(spec, rng)
    factors.mel_projection = mel_proj

    utterances = []
    for i in range(spec.n_utterances):
        urng = rng.spawn(("utt", i))
        n_sym = urng.integers(spec.symbols_per_utterance[0], spec.symbols_per_utterance[1] + 1)
        symbols = urng.integers(N_RESERVED, N_RESERVED + spec.vocab_size, (n_sym,)).astype(np.int64)
        durations = urng.integers(spec.frames_per_symbol[0], spec.frames_per_symbol[1] + 1, (n_sym,)).astype(np.int64)
        speaker = i % spec.n_speakers
        utterances.append(make_utterance(spec, factors, symbols, durations, speaker, urng))
    return Corpus(spec=spec, factors=factors, utterances=utterances)


# ---- binary container ------------------------------------------------------


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    # asarray, not ascontiguousarray: the latter promotes rank-0 arrays
    # to rank-1, and tobytes() already serializes in C order.
    data = np.asarray(arr, dtype="<f4")
    name_b = name.encode("utf-8")
    head = struct.pack("<H", len(name_b)) + name_b
    head += struct.pack("<BB", 0, data.ndim)
    head += struct.pack(f"<{data.ndim}Q", *data.shape)
    return head + data.tobytes()


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named f32 arrays in the feature-file container format."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", FORMAT_VERSION, len(arrays))
    for name, arr in arrays.items():
        blob += _pack_array(name, np.asarray(arr))
    with open(path, "wb") as f:
        f.write(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file ends inside {what} (needed {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def load_arrays(path) -> dict[str, np.ndarray]:
    """Parse a feature-file container into {name: f32 array}."""
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf)
    magic = r.take(8, "magic")
    if magic != MAGIC:
        raise MagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", r.take(8, "header"))
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2, "name length"))
        name = r.take(name_len, "array name").decode("utf-8")
        dtype_code, rank = struct.unpack("<BB", r.take(2, "array header"))
        if dtype_code not in _DTYPE_CODES:
            raise FeatureFileError(f"array {name!r}: unknown dtype code {dtype_code}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"dims of {name!r}"))
        n_items = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * n_items, f"data of {name!r}")
        arrays[name] = np.frombuffer(raw, dtype=_DTYPE_CODES[dtype_code]).reshape(dims).copy()
    if r.pos != len(buf):
        raise FeatureFileError(f"{len(buf) - r.pos} trailing bytes after last array")
    return arrays


def save_features(path, bundle: FeatureBundle) -> None:
    """Write one bundle; `symbols` is f32-cast (exact for id < 2**24)."""
    bundle.validate()
    arrays = {name: getattr(bundle, name) for name in REQUIRED_ARRAYS}
    for name in ("semantic", "acoustic", "speaker_frames", "speaker_global", "mel"):
        if arrays[name].dtype != np.float32:
            raise InvariantError(f"array {name!r} must be float32 to round-trip exactly, got {arrays[name].dtype}")
    save_arrays(path, arrays)


def load_features(path) -> FeatureBundle:
    arrays = load_arrays(path)
    missing = [n for n in REQUIRED_ARRAYS if n not in arrays]
    if missing:
        raise InvariantError(f"bundle file missing arrays: {missing}")
    bundle = FeatureBundle(
        semantic=arrays["semantic"],
        acoustic=arrays["acoustic"],
        speaker_frames=arrays["speaker_frames"],
        speaker_global=arrays["speaker_global"],
        mel=arrays["mel"],
        symbols=np.rint(arrays["symbols"]).astype(np.int64),
    )
    bundle.validate()
    return bundle
