"""Procedural two-domain benchmark with an exact translation oracle.

Latent-prototype model: class prototypes live on the unit sphere in
latent space, each sample perturbs its prototype, and each domain renders
latents through its own affine-tanh map onto the ambient unit sphere.
The two maps share a fraction (1 - domain_gap) of their parameters, so
the gap between domains is a single dial. Because the generator is
explicit, translation across domains is exact and inspectable: re-render
the (possibly corrupted) latent with the other domain's map.

Everything stochastic draws from substreams keyed by identifiers, so
generation is order-independent and bit-reproducible.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation, DataError
from .rng import substream

DOMAINS = ("A", "B")
_DOMAIN_CODE = {"A": 0, "B": 1}

# Rendering map scales. Weights of order one keep tanh in its curved
# regime for unit latents; the bias offsets the two domains' clouds.
_MAP_WEIGHT_SCALE = 1.0
_MAP_BIAS_SCALE = 0.3

MANIFEST_NAME = "manifest.json"
SAMPLES_NAME = "samples.jsonl"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class BenchmarkConfig:
    num_classes: int = 20
    samples_per_class: int = 50
    latent_dim: int = 8
    ambient_dim: int = 32
    within_class_std: float = 0.05
    domain_gap: float = 0.8
    master_seed: int = 20260810

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be positive")
        if self.latent_dim < 1 or self.ambient_dim < 1:
            raise ConfigError("dimensions must be positive")
        if self.latent_dim > self.ambient_dim:
            raise ConfigError(
                f"latent_dim {self.latent_dim} exceeds ambient_dim {self.ambient_dim}"
            )
        if self.within_class_std < 0:
            raise ConfigError("within_class_std must be >= 0")
        if not 0.0 <= self.domain_gap <= 1.0:
            raise ConfigError(f"domain_gap must be in [0, 1], got {self.domain_gap}")


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.5
    val_frac: float = 0.2
    test_frac: float = 0.3
    overlap_frac: float = 0.0
    split_seed: int = 0

    def __post_init__(self):
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {total}")
        if min(self.train_frac, self.val_frac, self.test_frac) <= 0:
            raise ConfigError("split fractions must be positive")
        if not 0.0 <= self.overlap_frac <= 1.0:
            raise ConfigError(f"overlap_frac must be in [0, 1], got {self.overlap_frac}")


@dataclass(frozen=True)
class TranslationConfig:
    p_keep: float = 1.0
    edit_strength: float = 1.0
    translation_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_keep <= 1.0:
            raise ConfigError(f"p_keep must be in [0, 1], got {self.p_keep}")
        if not 0.0 <= self.edit_strength <= 1.0:
            raise ConfigError(f"edit_strength must be in [0, 1], got {self.edit_strength}")
        if self.translation_noise < 0:
            raise ConfigError("translation_noise must be >= 0")


# Named dial combinations for storytelling; σ_t stays 0 so the quality
# metrics isolate the two dials that matter.
TRANSLATION_PRESETS = {
    "ideal": dict(p_keep=1.0, edit_strength=1.0, translation_noise=0.0),
    "high-fidelity": dict(p_keep=0.9, edit_strength=0.9, translation_noise=0.0),
    "low-edit": dict(p_keep=0.95, edit_strength=0.3, translation_noise=0.0),
    "noisy": dict(p_keep=0.6, edit_strength=1.0, translation_noise=0.0),
}


@dataclass(frozen=True)
class DomainSample:
    vec: np.ndarray  # unit-norm observable, length ambient_dim
    domain: str  # "A" or "B"
    class_id: int  # hidden from training; content class
    instance_id: int
    latent: np.ndarray | None  # hidden, oracle-only
    is_synthetic: bool = False
    pair_id: int | None = None  # instance id of the real source


def _normalize(v):
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ConfigError("cannot normalize a zero vector")
    return v / norm


class Dataset:
    """Immutable container: config, generator parameters, and real samples."""

    def __init__(self, config, prototypes, maps, samples):
        self.config = config
        self.prototypes = prototypes  # C x L unit rows, or None when not exported
        self.maps = maps  # {"A": (W, b), "B": (W, b)}, or None
        self.samples = tuple(samples)
        self.by_id = {s.instance_id: s for s in self.samples}
        self.synthetic_id_offset = 2 * config.num_classes * config.samples_per_class

    def __len__(self):
        return len(self.samples)

    def render(self, latent, domain):
        """Map a unit latent to this domain's observable unit vector."""
        if self.maps is None:
            raise ContractViolation("dataset was loaded without oracle parameters")
        w, b = self.maps[domain]
        return _normalize(np.tanh(w @ latent + b))

    def sample_latent(self, class_id, rng):
        if self.prototypes is None:
            raise ContractViolation("dataset was loaded without oracle parameters")
        noise = rng.standard_normal(self.config.latent_dim)
        return _normalize(self.prototypes[class_id] + self.config.within_class_std * noise)

    def get(self, instance_ids):
        return [self.by_id[int(i)] for i in instance_ids]

    def vectors(self, instance_ids):
        return np.stack([self.by_id[int(i)].vec for i in instance_ids])

    def labels(self, instance_ids):
        return np.array([self.by_id[int(i)].class_id for i in instance_ids], dtype=np.int64)


def generate_benchmark(config):
    """Build both domains deterministically from the master seed."""
    c, n = config.num_classes, config.samples_per_class
    ld, ad_ = config.latent_dim, config.ambient_dim
    seed = config.master_seed

    prototypes = np.stack(
        [_normalize(substream(seed, "proto", cls).standard_normal(ld)) for cls in range(c)]
    )

    w_a = _MAP_WEIGHT_SCALE * substream(seed, "map-w", 0).standard_normal((ad_, ld))
    b_a = _MAP_BIAS_SCALE * substream(seed, "map-b", 0).standard_normal(ad_)
    w_b_ind = _MAP_WEIGHT_SCALE * substream(seed, "map-w", 1).standard_normal((ad_, ld))
    b_b_ind = _MAP_BIAS_SCALE * substream(seed, "map-b", 1).standard_normal(ad_)
    gap = config.domain_gap
    maps = {
        "A": (w_a, b_a),
        "B": ((1.0 - gap) * w_a + gap * w_b_ind, (1.0 - gap) * b_a + gap * b_b_ind),
    }

    dataset = Dataset(config, prototypes, maps, samples=())
    samples = []
    for domain in DOMAINS:
        base = _DOMAIN_CODE[domain] * c * n
        for cls in range(c):
            for i in range(n):
                instance_id = base + cls * n + i
                rng = substream(seed, "latent", instance_id)
                latent = dataset.sample_latent(cls, rng)
                samples.append(
                    DomainSample(
                        vec=dataset.render(latent, domain),
                        domain=domain,
                        class_id=cls,
                        instance_id=instance_id,
                        latent=latent,
                    )
                )
    return Dataset(config, prototypes, maps, samples)


# ---------------------------------------------------------------------------
# category and data splits


def split_categories(num_classes, overlap_frac, seed):
    """Per-domain category sets of equal size k with s shared classes.

    k = round(C / (2 - overlap)); the shared count is then forced to
    s = 2k - C so the union always covers every class (this resolves any
    rounding slack by shaving s, never k).
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if not 0.0 <= overlap_frac <= 1.0:
        raise ConfigError(f"overlap_frac must be in [0, 1], got {overlap_frac}")
    k = int(np.floor(num_classes / (2.0 - overlap_frac) + 0.5))
    k = min(max(k, (num_classes + 1) // 2), num_classes)
    s = 2 * k - num_classes
    perm = substream(seed, "class-split").permutation(num_classes)
    shared = perm[:s]
    a_only = perm[s:k]
    b_only = perm[k : 2 * k - s]
    set_a = tuple(sorted(int(x) for x in np.concatenate([shared, a_only])))
    set_b = tuple(sorted(int(x) for x in np.concatenate([shared, b_only])))
    return set_a, set_b


@dataclass(frozen=True)
class SplitResult:
    train_a: tuple  # train partition filtered to the domain's category set
    train_b: tuple
    val_a: tuple
    val_b: tuple
    test_a: tuple
    test_b: tuple
    train_all_a: tuple  # unfiltered train partition; quality-analysis reference
    train_all_b: tuple
    class_set_a: tuple
    class_set_b: tuple

    def pool(self, name):
        return getattr(self, name)


def make_split(dataset, spec, swap_class_sets=False):
    """Per-class stratified train/val/test split inside each domain.

    Training pools are then filtered to the domain's category set; val
    and test keep every class. ``swap_class_sets`` exchanges the two
    category sets while leaving the data partition untouched.
    """
    cfg = dataset.config
    set_a, set_b = split_categories(cfg.num_classes, spec.overlap_frac, spec.split_seed)
    if swap_class_sets:
        set_a, set_b = set_b, set_a

    buckets = {}
    for domain in DOMAINS:
        members = {}
        for s in dataset.samples:
            if s.domain == domain:
                members.setdefault(s.class_id, []).append(s.instance_id)
        for cls, ids in members.items():
            count = len(ids)
            if count < 4:
                raise ConfigError(
                    f"class {cls} has {count} samples in domain {domain}; need >= 4 to stratify"
                )
            n_train = int(spec.train_frac * count + 0.5)
            n_val = int(spec.val_frac * count + 0.5)
            n_test = count - n_train - n_val
            if min(n_train, n_val, n_test) < 1:
                raise ConfigError(
                    f"class {cls} in domain {domain}: fractions leave an empty split"
                )
            order = substream(spec.split_seed, "data-split", _DOMAIN_CODE[domain], cls)
            ids = [ids[i] for i in order.permutation(count)]
            buckets[(domain, cls, "train")] = ids[:n_train]
            buckets[(domain, cls, "val")] = ids[n_train : n_train + n_val]
            buckets[(domain, cls, "test")] = ids[n_train + n_val :]

    def collect(domain, part, allowed=None):
        out = []
        for cls in range(cfg.num_classes):
            if allowed is not None and cls not in allowed:
                continue
            out.extend(buckets.get((domain, cls, part), []))
        return tuple(sorted(out))

    return SplitResult(
        train_a=collect("A", "train", set(set_a)),
        train_b=collect("B", "train", set(set_b)),
        val_a=collect("A", "val"),
        val_b=collect("B", "val"),
        test_a=collect("A", "test"),
        test_b=collect("B", "test"),
        train_all_a=collect("A", "train"),
        train_all_b=collect("B", "train"),
        class_set_a=set_a,
        class_set_b=set_b,
    )


# ---------------------------------------------------------------------------
# translation oracle


def translate(dataset, sample, target_domain, cfg, rng):
    """One label-preserving-with-probability translation of a real sample.

    With probability p_keep the source latent is reused; otherwise a fresh
    instance of a uniformly random different class replaces it, modeling
    an imperfect translator. The output blends the source observable with
    the target-domain rendering by edit_strength, adds isotropic noise,
    and renormalizes. zero edit and zero noise reproduce the source vector
    exactly. Draw order is fixed: keep-decision, corruption draws, noise.
    """
    if sample.is_synthetic:
        raise ContractViolation("cannot translate a synthetic sample")
    if target_domain not in DOMAINS or target_domain == sample.domain:
        raise ContractViolation(
            f"target domain must be the opposite of {sample.domain!r}"
        )
    c = dataset.config.num_classes

    keep = rng.uniform() < cfg.p_keep
    if keep:
        latent = sample.latent
        class_id = sample.class_id
    else:
        other = int(rng.integers(c - 1))
        class_id = other if other < sample.class_id else other + 1
        latent = dataset.sample_latent(class_id, rng)
    noise = rng.standard_normal(dataset.config.ambient_dim)

    alpha, sigma_t = cfg.edit_strength, cfg.translation_noise
    if alpha == 0.0 and sigma_t == 0.0:
        vec = sample.vec.copy()
    else:
        rendered = dataset.render(latent, target_domain)
        vec = _normalize((1.0 - alpha) * sample.vec + alpha * rendered + sigma_t * noise)

    return DomainSample(
        vec=vec,
        domain=target_domain,
        class_id=class_id,
        instance_id=dataset.synthetic_id_offset + sample.instance_id,
        latent=latent,
        is_synthetic=True,
        pair_id=sample.instance_id,
    )


def generate_synthetic_set(dataset, real_samples, target_domain, cfg):
    """One synthetic sample per real sample, in input order.

    Each translation draws from a substream keyed by (seed, source id),
    so outputs do not depend on iteration order.
    """
    real_samples = list(real_samples)
    if not real_samples:
        raise ContractViolation("generate_synthetic_set: empty input set")
    out = []
    for sample in real_samples:
        rng = substream(cfg.seed, "translate", sample.instance_id)
        out.append(translate(dataset, sample, target_domain, cfg, rng))
    return out


# ---------------------------------------------------------------------------
# export / import


def _sample_record(sample, split_name, with_oracle):
    rec = {
        "instance_id": sample.instance_id,
        "domain": sample.domain,
        "class_id": sample.class_id,
        "split": split_name,
        "is_synthetic": sample.is_synthetic,
        "pair_id": sample.pair_id,
        "vec": [float(x) for x in sample.vec],
    }
    if with_oracle:
        rec["latent"] = [float(x) for x in sample.latent]
    return rec


def export_dataset(dataset, split, out_dir, with_oracle=False):
    """Write manifest.json + samples.jsonl; byte-identical on rerun."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = dataset.config
    split_of = {}
    for name in ("train_all_a", "train_all_b", "val_a", "val_b", "test_a", "test_b"):
        part = name.split("_")[0]
        for i in split.pool(name):
            split_of[int(i)] = part
    set_a, set_b = split.class_set_a, split.class_set_b
    manifest = {
        "format_version": FORMAT_VERSION,
        "benchmark": {
            "num_classes": cfg.num_classes,
            "samples_per_class": cfg.samples_per_class,
            "latent_dim": cfg.latent_dim,
            "ambient_dim": cfg.ambient_dim,
            "within_class_std": cfg.within_class_std,
            "domain_gap": cfg.domain_gap,
            "master_seed": cfg.master_seed,
        },
        "class_sets": {
            "A": list(set_a),
            "B": list(set_b),
            "per_domain_count": len(set_a),
            "shared_count": len(set(set_a) & set(set_b)),
        },
        "split_counts": {
            name: len(split.pool(name))
            for name in (
                "train_a",
                "train_b",
                "val_a",
                "val_b",
                "test_a",
                "test_b",
                "train_all_a",
                "train_all_b",
            )
        },
        "with_oracle": bool(with_oracle),
    }
    if with_oracle:
        manifest["oracle"] = {
            "prototypes": [[float(x) for x in row] for row in dataset.prototypes],
            "maps": {
                d: {
                    "weight": [[float(x) for x in row] for row in dataset.maps[d][0]],
                    "bias": [float(x) for x in dataset.maps[d][1]],
                }
                for d in DOMAINS
            },
        }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, SAMPLES_NAME), "w") as fh:
        for sample in dataset.samples:
            split_name = split_of.get(sample.instance_id, "unused")
            fh.write(json.dumps(_sample_record(sample, split_name, with_oracle), sort_keys=True))
            fh.write("\n")


def load_dataset(out_dir):
    """Rebuild (Dataset, SplitResult) from an exported directory."""
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {manifest_path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{manifest_path}: unsupported format_version")
    cfg = BenchmarkConfig(**manifest["benchmark"])

    prototypes = maps = None
    if manifest.get("with_oracle"):
        oracle = manifest["oracle"]
        prototypes = np.array(oracle["prototypes"], dtype=np.float64)
        maps = {
            d: (
                np.array(oracle["maps"][d]["weight"], dtype=np.float64),
                np.array(oracle["maps"][d]["bias"], dtype=np.float64),
            )
            for d in DOMAINS
        }

    samples = []
    pools = {(part, d): [] for part in ("train", "val", "test") for d in DOMAINS}
    with open(os.path.join(out_dir, SAMPLES_NAME)) as fh:
        for line_no, line in enumerate(fh, 1):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{SAMPLES_NAME}:{line_no}: {exc}") from exc
            samples.append(
                DomainSample(
                    vec=np.array(rec["vec"], dtype=np.float64),
                    domain=rec["domain"],
                    class_id=rec["class_id"],
                    instance_id=rec["instance_id"],
                    latent=np.array(rec["latent"], dtype=np.float64)
                    if "latent" in rec
                    else None,
                    is_synthetic=rec["is_synthetic"],
                    pair_id=rec["pair_id"],
                )
            )
            if rec["split"] != "unused":
                pools[(rec["split"], rec["domain"])].append(rec["instance_id"])
    set_a = tuple(manifest["class_sets"]["A"])
    set_b = tuple(manifest["class_sets"]["B"])
    class_of = {s.instance_id: s.class_id for s in samples}
    split = SplitResult(
        train_a=tuple(sorted(i for i in pools[("train", "A")] if class_of[i] in set(set_a))),
        train_b=tuple(sorted(i for i in pools[("train", "B")] if class_of[i] in set(set_b))),
        val_a=tuple(sorted(pools[("val", "A")])),
        val_b=tuple(sorted(pools[("val", "B")])),
        test_a=tuple(sorted(pools[("test", "A")])),
        test_b=tuple(sorted(pools[("test", "B")])),
        train_all_a=tuple(sorted(pools[("train", "A")])),
        train_all_b=tuple(sorted(pools[("train", "B")])),
        class_set_a=set_a,
        class_set_b=set_b,
    )
    return Dataset(cfg, prototypes, maps, samples), split
