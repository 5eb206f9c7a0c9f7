"""Seeded synthetic two-modality world.

Each class owns one keyword; a caption is a small set of keywords that always
contains the class keyword. Images and texts are noisy random projections of
the mean keyword prototype, so visually similar images share keywords while
their full captions differ. Unlabeled images can be drawn from a shifted
distribution (skewed class prior or perturbed prototypes).
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core_math import normalize_rows
from .errors import BadMagic, ParseError, SpecInvalid

SHIFT_KINDS = ("none", "class_prior", "prototype_perturbation")

# rng stream ids; each split draws from its own stream
_WORLD, _PERTURB, _LABELED, _UNLABELED, _TEST = range(5)


@dataclass
class Shift:
    kind: str = "none"
    skew: float = 0.5
    sigma: float = 0.3


@dataclass
class WorldSpec:
    num_classes: int = 10
    vocab_size: int = 40
    keywords_per_caption: tuple[int, int] = (2, 4)
    latent_dim: int = 16
    d_img_raw: int = 32
    d_txt_raw: int = 32
    image_noise_sigma: float = 0.05
    text_noise_sigma: float = 0.05
    extras_per_class: int = 6
    detail_sigma: float = 0.0
    image_offset: float = 0.0
    image_offset_jitter: float = 0.0
    captions_per_image: int = 1
    shift: Shift = field(default_factory=Shift)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.shift, dict):
            self.shift = Shift(**self.shift)
        self.keywords_per_caption = tuple(self.keywords_per_caption)

    def validate(self) -> None:
        lo, hi = self.keywords_per_caption
        checks = [
            (self.num_classes >= 2, "num_classes", "must be >= 2"),
            (self.vocab_size >= self.num_classes, "vocab_size", "must be >= num_classes"),
            (lo >= 1, "keywords_per_caption", "l_min must be >= 1"),
            (hi >= lo, "keywords_per_caption", "l_max must be >= l_min"),
            (self.latent_dim >= 1, "latent_dim", "must be >= 1"),
            (self.d_img_raw >= 1, "d_img_raw", "must be >= 1"),
            (self.d_txt_raw >= 1, "d_txt_raw", "must be >= 1"),
            (self.image_noise_sigma >= 0, "image_noise_sigma", "must be >= 0"),
            (self.text_noise_sigma >= 0, "text_noise_sigma", "must be >= 0"),
            (self.detail_sigma >= 0, "detail_sigma", "must be >= 0"),
            (self.image_offset_jitter >= 0, "image_offset_jitter", "must be >= 0"),
            (self.extras_per_class >= 0, "extras_per_class", "must be >= 0"),
            (self.captions_per_image >= 1, "captions_per_image", "must be >= 1"),
            (self.shift.kind in SHIFT_KINDS, "shift.kind", f"must be one of {SHIFT_KINDS}"),
            (self.shift.skew > 0, "shift.skew", "must be > 0"),
            (self.shift.sigma >= 0, "shift.sigma", "must be >= 0"),
        ]
        for ok, name, msg in checks:
            if not ok:
                raise SpecInvalid(f"{name}: {msg}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["keywords_per_caption"] = list(self.keywords_per_caption)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise SpecInvalid(f"unknown world fields: {sorted(unknown)}")
        if "shift" in d:
            s = d["shift"]
            d["shift"] = s if isinstance(s, Shift) else Shift(**s)
        if "keywords_per_caption" in d:
            d["keywords_per_caption"] = tuple(d["keywords_per_caption"])
        return cls(**d)


@dataclass
class World:
    spec: WorldSpec
    prototypes: np.ndarray          # K x latent_dim, unit rows
    unlabeled_prototypes: np.ndarray
    class_keyword: np.ndarray       # class -> its own keyword index
    extra_table: np.ndarray         # C x K sampling weights for the non-class keywords
    proj_img: np.ndarray            # latent_dim x d_img_raw
    proj_txt: np.ndarray            # latent_dim x d_txt_raw
    offset_dir: np.ndarray          # unit direction of the shared image-domain component
    labeled_prior: np.ndarray
    unlabeled_prior: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def vocab_size(self) -> int:
        return self.spec.vocab_size

    def keyword_raw_text(self) -> np.ndarray:
        """Noise-free text features of each single keyword (the class-prompt analog)."""
        return self.prototypes @ self.proj_txt


@dataclass
class SynthSample:
    raw_image: np.ndarray
    raw_text: np.ndarray | None
    keyword_indices: list[int]
    class_index: int


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def generate_world(spec: WorldSpec) -> World:
    spec.validate()
    rng = _rng(spec.seed, _WORLD)
    c, k, ld = spec.num_classes, spec.vocab_size, spec.latent_dim
    prototypes = normalize_rows(rng.standard_normal((k, ld)))
    class_keyword = np.arange(c)

    extras = np.arange(c, k)
    table = np.zeros((c, k))
    for cls in range(c):
        if extras.size == 0:
            break
        n_pick = min(spec.extras_per_class, extras.size) if spec.extras_per_class else extras.size
        picked = rng.choice(extras, size=n_pick, replace=False)
        table[cls, picked] = rng.dirichlet(np.ones(n_pick))

    proj_img = rng.standard_normal((ld, spec.d_img_raw)) / np.sqrt(ld)
    proj_txt = rng.standard_normal((ld, spec.d_txt_raw)) / np.sqrt(ld)
    offset_dir = normalize_rows(rng.standard_normal(spec.d_img_raw))[0]

    labeled_prior = np.full(c, 1.0 / c)
    unlabeled_prior = labeled_prior
    unlabeled_prototypes = prototypes
    if spec.shift.kind == "class_prior":
        w = spec.shift.skew ** np.arange(c, dtype=np.float64)
        unlabeled_prior = w / w.sum()
    elif spec.shift.kind == "prototype_perturbation" and spec.shift.sigma > 0:
        noise = _rng(spec.seed, _PERTURB).standard_normal((k, ld))
        unlabeled_prototypes = normalize_rows(prototypes + spec.shift.sigma * noise / np.sqrt(ld))

    return World(
        spec, prototypes, unlabeled_prototypes, class_keyword, table,
        proj_img, proj_txt, offset_dir, labeled_prior, unlabeled_prior,
    )


def _draw_keywords(world: World, cls: int, rng: np.random.Generator) -> list[int]:
    lo, hi = world.spec.keywords_per_caption
    l = int(rng.integers(lo, hi + 1))
    weights = world.extra_table[cls]
    avail = int(np.count_nonzero(weights))
    n_extra = min(l - 1, avail)
    kws = [int(world.class_keyword[cls])]
    if n_extra > 0:
        kws += [int(j) for j in rng.choice(world.vocab_size, size=n_extra, replace=False, p=weights)]
    return sorted(kws)


def _sample(world: World, n: int, rng, prior, prototypes, with_text: bool) -> list[SynthSample]:
    spec = world.spec
    if n < 1:
        raise ValueError("sample count must be >= 1")
    out = []
    for _ in range(n):
        cls = int(rng.choice(world.num_classes, p=prior))
        kws = _draw_keywords(world, cls, rng)
        latent = prototypes[kws].mean(axis=0)
        detail = 0.0
        if spec.detail_sigma:
            detail = spec.detail_sigma * rng.standard_normal(spec.latent_dim) / np.sqrt(spec.latent_dim)
        latent = latent + detail
        img = latent @ world.proj_img + spec.image_noise_sigma * rng.standard_normal(spec.d_img_raw)
        if spec.image_offset or spec.image_offset_jitter:
            img = img + (spec.image_offset + spec.image_offset_jitter * rng.standard_normal()) * world.offset_dir
        txt = None
        if with_text:
            txt = ((world.prototypes[kws].mean(axis=0) + detail) @ world.proj_txt
                   + spec.text_noise_sigma * rng.standard_normal(spec.d_txt_raw))
        out.append(SynthSample(img, txt, kws, cls))
    return out


def sample_paired(world: World, n: int, rng: np.random.Generator) -> list[SynthSample]:
    return _sample(world, n, rng, world.labeled_prior, world.prototypes, True)


def sample_unlabeled(world: World, m: int, rng: np.random.Generator) -> list[SynthSample]:
    return _sample(world, m, rng, world.unlabeled_prior, world.unlabeled_prototypes, False)


def _caption_subsets(world: World, sample: SynthSample, rng) -> tuple[np.ndarray, list[list[int]]]:
    """Extra captions for one image: each keeps the class keyword and a random
    subset of the image's other keywords."""
    spec = world.spec
    texts = [sample.raw_text]
    kw_lists = [sample.keyword_indices]
    cls_kw = int(world.class_keyword[sample.class_index])
    others = [k for k in sample.keyword_indices if k != cls_kw]
    for _ in range(spec.captions_per_image - 1):
        keep = [k for k in others if rng.random() < 0.5]
        kws = sorted([cls_kw] + keep)
        txt = (world.prototypes[kws].mean(axis=0) @ world.proj_txt
               + spec.text_noise_sigma * rng.standard_normal(spec.d_txt_raw))
        texts.append(txt)
        kw_lists.append(kws)
    return np.stack(texts), kw_lists


@dataclass
class Split:
    images: np.ndarray                  # n x d_img
    texts: np.ndarray                   # n x c x d_txt (c = 0 for unlabeled)
    caption_keywords: list[list[list[int]]]  # [sample][caption] -> keyword indices
    image_keywords: list[list[int]]
    classes: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def captions_per_image(self) -> int:
        return self.texts.shape[1]


@dataclass
class Dataset:
    spec: WorldSpec
    keyword_raw: np.ndarray             # K x d_txt
    class_keyword: np.ndarray
    labeled: Split
    unlabeled: Split
    test: Split


def _to_split(world: World, samples: list[SynthSample], rng, with_text: bool) -> Split:
    d_txt = world.spec.d_txt_raw
    if with_text:
        pairs = [_caption_subsets(world, s, rng) for s in samples]
        texts = np.stack([t for t, _ in pairs])
        cap_kw = [kw for _, kw in pairs]
    else:
        texts = np.zeros((len(samples), 0, d_txt))
        cap_kw = [[] for _ in samples]
    return Split(
        np.stack([s.raw_image for s in samples]),
        texts,
        cap_kw,
        [s.keyword_indices for s in samples],
        np.array([s.class_index for s in samples], dtype=np.int64),
    )


def make_dataset(spec: WorldSpec, n_labeled: int, n_unlabeled: int, n_test: int) -> Dataset:
    world = generate_world(spec)
    lab_rng = _rng(spec.seed, _LABELED)
    unl_rng = _rng(spec.seed, _UNLABELED)
    test_rng = _rng(spec.seed, _TEST)
    labeled = _to_split(world, sample_paired(world, n_labeled, lab_rng), lab_rng, True)
    unlabeled = _to_split(world, sample_unlabeled(world, n_unlabeled, unl_rng), unl_rng, False)
    test = _to_split(world, sample_paired(world, n_test, test_rng), test_rng, True)
    return Dataset(spec, world.keyword_raw_text(), world.class_keyword.copy(), labeled, unlabeled, test)


# --- SCDS1 binary format -------------------------------------------------------
#
# magic "SCDS1", then u32: num_classes, vocab_size, d_img, d_txt
# keyword_raw (K x d_txt f64), class_keyword (C x u32)
# three splits (labeled, unlabeled, test), each:
#   u32 n, u32 captions_per_image
#   images (n x d_img f64), texts (n x c x d_txt f64), classes (n x u32)
#   per sample: image keyword list, then c caption keyword lists;
#   every list is u32 length followed by u32 indices

DATASET_MAGIC = b"SCDS1"


def _put_u32(buf, *vals):
    buf.write(struct.pack(f"<{len(vals)}I", *vals))


def _put_f64(buf, arr):
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _put_list(buf, idx):
    _put_u32(buf, len(idx), *idx)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"unexpected end of data at offset {self.pos} (need {n} bytes)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u32s(self, count: int) -> list[int]:
        return list(struct.unpack(f"<{count}I", self.take(4 * count)))

    def f64(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)

    def index_list(self) -> list[int]:
        return self.u32s(self.u32())


def dataset_to_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    d_img = ds.labeled.images.shape[1]
    d_txt = ds.keyword_raw.shape[1]
    _put_u32(buf, len(ds.class_keyword), ds.keyword_raw.shape[0], d_img, d_txt)
    _put_f64(buf, ds.keyword_raw)
    _put_u32(buf, *[int(c) for c in ds.class_keyword])
    for split in (ds.labeled, ds.unlabeled, ds.test):
        _put_u32(buf, len(split), split.captions_per_image)
        _put_f64(buf, split.images)
        _put_f64(buf, split.texts)
        _put_u32(buf, *[int(c) for c in split.classes])
        for i in range(len(split)):
            _put_list(buf, split.image_keywords[i])
            for kws in split.caption_keywords[i]:
                _put_list(buf, kws)
    return buf.getvalue()


def dataset_from_bytes(data: bytes, spec: WorldSpec) -> Dataset:
    if data[:5] != DATASET_MAGIC:
        raise BadMagic(f"expected {DATASET_MAGIC!r}, got {data[:5]!r}")
    r = _Reader(data)
    r.pos = 5
    n_cls, k, d_img, d_txt = r.u32s(4)
    keyword_raw = r.f64((k, d_txt))
    class_keyword = np.array(r.u32s(n_cls), dtype=np.int64)
    splits = []
    for _ in range(3):
        n, c = r.u32s(2)
        images = r.f64((n, d_img))
        texts = r.f64((n, c, d_txt))
        classes = np.array(r.u32s(n), dtype=np.int64)
        img_kw, cap_kw = [], []
        for _ in range(n):
            img_kw.append(r.index_list())
            cap_kw.append([r.index_list() for _ in range(c)])
        splits.append(Split(images, texts, cap_kw, img_kw, classes))
    if r.pos != len(data):
        raise ParseError(f"{len(data) - r.pos} trailing bytes after dataset")
    return Dataset(spec, keyword_raw, class_keyword, *splits)


def save_dataset(ds: Dataset, path) -> tuple[Path, Path]:
    """Write ``path`` (binary) and ``path.json`` (world spec sidecar)."""
    from .formats import atomic_write

    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    atomic_write(path, dataset_to_bytes(ds))
    meta = {"format": "SCDS1", "world": ds.spec.to_dict(),
            "counts": {"labeled": len(ds.labeled), "unlabeled": len(ds.unlabeled), "test": len(ds.test)}}
    atomic_write(sidecar, (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return path, sidecar


def load_dataset(path) -> Dataset:
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    meta = json.loads(sidecar.read_text())
    return dataset_from_bytes(path.read_bytes(), WorldSpec.from_dict(meta["world"]))
