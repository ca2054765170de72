"""Feature-bundle disk format, tokenization, vocabulary and toy corpora.

One bundle file holds the pre-extracted features and reference captions for a
single image.  Layout (all integers little-endian):

    magic "SFDR" | u32 version | u32 d_v,d_t,H,d_g,k,d_r | u8 flags
    | u32 id_len + id bytes
    | f32 clip_visual[d_v] | f32 clip_text[d_t] (only if flags bit0)
    | f32 grid[H*d_g] | f32 roi[k*d_r]
    | u16 n_captions | (u32 len + utf-8 bytes) per caption

Feature values must be float32-representable so that write followed by read
is a bit-exact identity.
"""

from __future__ import annotations

import hashlib
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SFDR"
FORMAT_VERSION = 1
MANIFEST_NAME = "corpus.manifest"

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_WORD_RE = re.compile(r"[^a-z0-9]+")


class FormatError(ValueError):
    """A bundle or manifest file violates the on-disk format."""


def tokenize(sentence: str) -> list[str]:
    """Lowercase, strip punctuation to spaces, split on whitespace."""
    return _WORD_RE.sub(" ", sentence.lower()).split()


class Vocabulary:
    """Dense token ids with the four specials pinned at ids 0-3."""

    def __init__(self, tokens: list[str]):
        self.id_to_token = list(SPECIAL_TOKENS) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def content_hash(self) -> str:
        blob = "\n".join(self.id_to_token).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def build_vocab(corpora: list[list[str]], min_count: int = 5) -> Vocabulary:
    """Retain tokens with frequency strictly greater than min_count.

    Deterministic order: frequency descending, then token ascending.
    """
    if min_count < 0:
        raise ValueError(f"min_count must be >= 0, got {min_count}")
    counts = Counter()
    for tokens in corpora:
        counts.update(tokens)
    kept = [t for t, c in counts.items() if c > min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


@dataclass
class TokenSeq:
    """A caption as vocabulary ids: BOS, content tokens, then EOS if complete."""

    ids: list[int]

    def __post_init__(self):
        if not self.ids or self.ids[0] != BOS:
            raise ValueError("token sequence must start with BOS")
        if PAD in self.ids[1:]:
            raise ValueError("PAD may not appear inside a token sequence")

    @property
    def complete(self) -> bool:
        return len(self.ids) > 1 and self.ids[-1] == EOS

    @property
    def content(self) -> list[int]:
        body = self.ids[1:]
        return body[:-1] if self.complete else body

    @classmethod
    def from_caption(cls, vocab: Vocabulary, sentence: str,
                     max_len: int) -> "TokenSeq":
        words = vocab.encode(tokenize(sentence))[: max_len - 1]
        return cls([BOS] + words + [EOS])

    def text(self, vocab: Vocabulary) -> str:
        return " ".join(vocab.decode(self.content))


def roi_window_count(beta: int, gamma: int, tau: int) -> int:
    """Number of sliding windows: ((beta - gamma) / tau + 1) squared.

    Non-divisible spans floor the quotient, matching how a sliding window
    stops at the border.
    """
    if tau <= 0:
        raise ValueError(f"stride must be positive, got {tau}")
    if gamma > beta:
        raise ValueError(f"window {gamma} larger than image {beta}")
    per_axis = (beta - gamma) // tau + 1
    return per_axis * per_axis


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusHeader:
    d_v: int
    d_t: int
    H: int
    d_g: int
    k: int
    d_r: int

    def pack(self) -> bytes:
        return struct.pack("<6I", self.d_v, self.d_t, self.H,
                           self.d_g, self.k, self.d_r)


@dataclass
class FeatureBundle:
    image_id: str
    clip_visual: np.ndarray          # 1 x d_v
    clip_text: np.ndarray | None     # 1 x d_t, absent at inference
    grid: np.ndarray                 # H x d_g
    roi: np.ndarray                  # k x d_r
    captions: list[str] = field(default_factory=list)

    def validate(self, header: CorpusHeader) -> None:
        checks = [
            ("clip_visual", self.clip_visual, (1, header.d_v)),
            ("grid", self.grid, (header.H, header.d_g)),
            ("roi", self.roi, (header.k, header.d_r)),
        ]
        if self.clip_text is not None:
            checks.append(("clip_text", self.clip_text, (1, header.d_t)))
        for name, arr, want in checks:
            if arr.shape != want:
                raise FormatError(
                    f"{self.image_id}: {name} shape {arr.shape} != header {want}")
            if not np.all(np.isfinite(arr)):
                raise FormatError(f"{self.image_id}: {name} has non-finite values")


def _as_f32_bytes(name: str, arr: np.ndarray) -> bytes:
    arr32 = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.array_equal(arr32.astype(np.float64), np.asarray(arr, dtype=np.float64)):
        raise FormatError(
            f"{name} values are not float32-representable; bundle files "
            "store f32 and must round-trip bit-exactly")
    return arr32.tobytes()


def write_bundle(bundle: FeatureBundle, path, header: CorpusHeader) -> None:
    bundle.validate(header)
    flags = 1 if bundle.clip_text is not None else 0
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += header.pack()
    out += struct.pack("<B", flags)
    id_bytes = bundle.image_id.encode("utf-8")
    out += struct.pack("<I", len(id_bytes)) + id_bytes
    out += _as_f32_bytes("clip_visual", bundle.clip_visual)
    if bundle.clip_text is not None:
        out += _as_f32_bytes("clip_text", bundle.clip_text)
    out += _as_f32_bytes("grid", bundle.grid)
    out += _as_f32_bytes("roi", bundle.roi)
    if len(bundle.captions) > 0xFFFF:
        raise FormatError("too many captions for u16 count")
    out += struct.pack("<H", len(bundle.captions))
    for cap in bundle.captions:
        cap_bytes = cap.encode("utf-8")
        out += struct.pack("<I", len(cap_bytes)) + cap_bytes
    Path(path).write_bytes(bytes(out))


class _Reader:
    """Cursor over a byte payload that reports offsets on failure."""

    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated while reading {what} at byte {self.off}")
        chunk = self.blob[self.off:self.off + n]
        self.off += n
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what: str) -> str:
        n = self.u32(f"{what} length")
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.path}: bad utf-8 in {what}: {exc}") from None

    def f32_matrix(self, rows: int, cols: int, what: str) -> np.ndarray:
        raw = self.take(4 * rows * cols, what)
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        return arr.reshape(rows, cols)


def read_header(path) -> CorpusHeader:
    blob = Path(path).read_bytes()
    return _parse(blob, path, header_only=True)[0]


def read_bundle(path, expect: CorpusHeader | None = None) -> FeatureBundle:
    blob = Path(path).read_bytes()
    header, bundle = _parse(blob, path, header_only=False)
    if expect is not None and header != expect:
        raise FormatError(
            f"{path}: bundle header {header} does not match corpus header {expect}")
    bundle.validate(header)
    return bundle


def _parse(blob: bytes, path, header_only: bool):
    r = _Reader(blob, path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    d_v, d_t, big_h, d_g, k, d_r = struct.unpack("<6I", r.take(24, "corpus header"))
    header = CorpusHeader(d_v, d_t, big_h, d_g, k, d_r)
    if header_only:
        return header, None
    flags = r.u8("flags")
    image_id = r.text("image id")
    clip_visual = r.f32_matrix(1, d_v, "clip_visual")
    clip_text = r.f32_matrix(1, d_t, "clip_text") if flags & 1 else None
    grid = r.f32_matrix(big_h, d_g, "grid")
    roi = r.f32_matrix(k, d_r, "roi")
    n_caps = r.u16("caption count")
    captions = [r.text(f"caption {i}") for i in range(n_caps)]
    if r.off != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.off} trailing bytes at {r.off}")
    return header, FeatureBundle(image_id, clip_visual, clip_text, grid, roi,
                                 captions)


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class Corpus:
    header: CorpusHeader
    splits: dict[str, list[FeatureBundle]]

    def bundles(self, split: str) -> list[FeatureBundle]:
        return self.splits.get(split, [])

    def all_bundles(self) -> list[FeatureBundle]:
        return [b for s in SPLITS for b in self.splits.get(s, [])]

    def training_token_lists(self) -> list[list[str]]:
        out = []
        for b in self.bundles("train"):
            for cap in b.captions:
                out.append(tokenize(cap))
        return out


def save_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    (out / "bundles").mkdir(parents=True, exist_ok=True)
    lines = []
    for split in SPLITS:
        for bundle in corpus.splits.get(split, []):
            rel = f"bundles/{bundle.image_id}.sfdr"
            write_bundle(bundle, out / rel, corpus.header)
            lines.append(f"{split}\t{rel}")
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_corpus(corpus_dir) -> Corpus:
    root = Path(corpus_dir)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise FormatError(f"missing manifest {manifest}")
    header: CorpusHeader | None = None
    splits: dict[str, list[FeatureBundle]] = {s: [] for s in SPLITS}
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            split, rel = line.split("\t")
        except ValueError:
            raise FormatError(f"{manifest}:{lineno}: expected 'split<TAB>path'") from None
        if split not in SPLITS:
            raise FormatError(f"{manifest}:{lineno}: unknown split {split!r}")
        path = root / rel
        if header is None:
            header = read_header(path)
        splits[split].append(read_bundle(path, expect=header))
    if header is None:
        raise FormatError(f"{manifest}: no bundles listed")
    return Corpus(header, splits)


# ---------------------------------------------------------------------------
# synthetic toy corpora
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticDims:
    d_v: int = 32
    d_t: int = 32
    H: int = 16
    d_g: int = 64
    k: int = 8
    d_r: int = 32
    classes: int = 4

    def header(self) -> CorpusHeader:
        return CorpusHeader(self.d_v, self.d_t, self.H, self.d_g, self.k, self.d_r)


_CLASS_CAPTIONS = [
    ["many small houses are arranged neatly beside a road",
     "lots of small houses stand in rows near a road",
     "a residential area with many small houses and a road"],
    ["an airplane is parked on the gray runway",
     "a white airplane stops on the wide runway",
     "one airplane stands still on the long runway"],
    ["several boats are docked in the blue harbor",
     "some boats float quietly inside the blue harbor",
     "a harbor holds several boats on calm blue water"],
    ["a large green meadow with some scattered trees",
     "the green meadow spreads out with a few trees",
     "scattered trees grow across a large green meadow"],
    ["a curved river flows between two dense forests",
     "the narrow river winds through the dark forest",
     "a river runs across the forest in a gentle curve"],
    ["a big square parking lot is full of cars",
     "many cars fill the rows of the parking lot",
     "cars are parked in straight lines on the lot"],
    ["a long bridge crosses over the wide river",
     "the bridge spans the river with steady pillars",
     "a wide river passes beneath a long bridge"],
    ["an industrial area with several gray storage tanks",
     "gray storage tanks cluster inside the industrial area",
     "several storage tanks sit close to the factory"],
]

_CENTROID_SALT = 0x5FD2


def _class_centroids(dims: SyntheticDims):
    """Per-class feature centroids, fixed across seeds for a given geometry."""
    rng = np.random.default_rng(
        (_CENTROID_SALT, dims.d_v, dims.d_t, dims.H, dims.d_g, dims.k, dims.d_r))
    cents = []
    for _ in range(dims.classes):
        cents.append({
            "clip_visual": rng.normal(0.0, 2.0, (1, dims.d_v)),
            "clip_text": rng.normal(0.0, 2.0, (1, dims.d_t)),
            "grid": rng.normal(0.0, 2.0, (dims.H, dims.d_g)),
            "roi": rng.normal(0.0, 2.0, (dims.k, dims.d_r)),
        })
    return cents


def _f32(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32).astype(np.float64)


def gen_synthetic_corpus(n_images: int, seed: int,
                         dims: SyntheticDims | None = None,
                         captions_per_image: int = 1,
                         noise: float = 0.35) -> Corpus:
    """Deterministic per-class Gaussian features with class-tied captions.

    Splits are assigned 80/10/10 with classes interleaved so that every class
    appears in the training split whenever it can.
    """
    if n_images < 1:
        raise ValueError("need at least one image")
    dims = dims or SyntheticDims()
    if dims.classes > len(_CLASS_CAPTIONS):
        raise ValueError(
            f"at most {len(_CLASS_CAPTIONS)} caption classes available")
    rng = np.random.default_rng(seed)
    centroids = _class_centroids(dims)

    by_class: list[list[FeatureBundle]] = [[] for _ in range(dims.classes)]
    for i in range(n_images):
        cls = i % dims.classes
        cent = centroids[cls]
        caps = [_CLASS_CAPTIONS[cls][j % len(_CLASS_CAPTIONS[cls])]
                for j in range(captions_per_image)]
        bundle = FeatureBundle(
            image_id=f"img_{i:04d}",
            clip_visual=_f32(cent["clip_visual"] + rng.normal(0, noise, (1, dims.d_v))),
            clip_text=_f32(cent["clip_text"] + rng.normal(0, noise, (1, dims.d_t))),
            grid=_f32(cent["grid"] + rng.normal(0, noise, (dims.H, dims.d_g))),
            roi=_f32(cent["roi"] + rng.normal(0, noise, (dims.k, dims.d_r))),
            captions=caps,
        )
        by_class[cls].append(bundle)

    for group in by_class:
        rng.shuffle(group)
    interleaved: list[FeatureBundle] = []
    round_i = 0
    while len(interleaved) < n_images:
        for group in by_class:
            if round_i < len(group):
                interleaved.append(group[round_i])
        round_i += 1

    n_test = max(1, n_images // 10) if n_images >= 3 else 0
    n_val = max(1, n_images // 10) if n_images >= 3 else 0
    splits = {
        "test": interleaved[:n_test],
        "val": interleaved[n_test:n_test + n_val],
        "train": interleaved[n_test + n_val:],
    }
    return Corpus(dims.header(), splits)


def caption_class(caption: str) -> int | None:
    """Index of the synthetic class a caption belongs to, if any."""
    for cls, variants in enumerate(_CLASS_CAPTIONS):
        if caption in variants:
            return cls
    return None
