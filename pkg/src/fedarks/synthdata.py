"""Procedural multi-domain person-retrieval federation.

Every identity owns three part latents (head, torso, lower body).  A sample
is rendered by projecting each part latent through a fixed per-part basis
into its horizontal strip, then applying

* a per-camera additive field (shared by all domains),
* a per-domain affine style ``(1 + s*gain) * x + s*bias``,
* i.i.d. pixel noise,
* per-domain part occlusion that zeroes one strip.

The part bases are shared by all domains, so identity structure transfers
across domains while the style, occlusion pattern and identities do not.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

NUM_PARTS = 3
PART_NAMES = ("head", "torso", "lower")


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass(frozen=True)
class FederationConfig:
    num_domains: int = 4
    identities_per_domain: int = 12
    samples_per_identity: int = 6
    cameras_per_domain: int = 2
    image_height: int = 24
    image_width: int = 12
    feature_noise_sigma: float = 0.4
    domain_shift_strength: float = 0.5
    # scalar q: domain d occludes part (d mod 3) with probability q;
    # or an explicit num_domains x 3 table of per-part probabilities
    part_occlusion_prob: float | tuple[tuple[float, ...], ...] = 0.3
    seed: int = 7
    latent_dim: int = 6
    identity_jitter: float = 0.5
    camera_shift: float = 0.8

    def __post_init__(self):
        for name in ("num_domains", "identities_per_domain", "samples_per_identity",
                     "image_height", "image_width", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.identities_per_domain < 2:
            raise ConfigError("identities_per_domain must be >= 2 (triplet mining needs two identities)")
        if self.cameras_per_domain < 2:
            raise ConfigError("cameras_per_domain must be >= 2")
        if self.samples_per_identity < 2 * self.cameras_per_domain:
            raise ConfigError("samples_per_identity must be >= 2 * cameras_per_domain "
                              "(one query and one gallery sample per camera)")
        if self.image_height % NUM_PARTS:
            raise ConfigError(f"image_height must be divisible by 3, got {self.image_height}")
        for name in ("feature_noise_sigma", "domain_shift_strength", "identity_jitter", "camera_shift"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative")
        table = self.occlusion_table()
        if np.any(table < 0) or np.any(table > 1):
            raise ConfigError("part_occlusion_prob entries must lie in [0, 1]")

    def occlusion_table(self) -> np.ndarray:
        p = self.part_occlusion_prob
        if np.ndim(p) == 0:
            table = np.zeros((self.num_domains, NUM_PARTS))
            table[np.arange(self.num_domains), np.arange(self.num_domains) % NUM_PARTS] = float(p)
            return table
        table = np.asarray(p, dtype=np.float64)
        if table.shape != (self.num_domains, NUM_PARTS):
            raise ConfigError(f"part_occlusion_prob table must be {self.num_domains}x3, got {table.shape}")
        return table

    @property
    def strip_height(self) -> int:
        return self.image_height // NUM_PARTS


@dataclass(frozen=True, eq=False)
class Sample:
    pixels: np.ndarray
    identity: int
    domain: int
    camera: int


@dataclass(frozen=True, eq=False)
class PartViews:
    head: np.ndarray
    torso: np.ndarray
    lower: np.ndarray

    def strips(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.head, self.torso, self.lower


@dataclass(frozen=True)
class DomainStyle:
    gain: np.ndarray
    bias: np.ndarray


@dataclass(eq=False)
class DomainData:
    """All samples of one domain.

    ``train`` holds every sample; ``query``/``gallery`` partition the same
    samples for use when the domain is held out.
    """

    domain: int
    train: list[Sample]
    query: list[Sample]
    gallery: list[Sample]
    part_latents: dict[int, np.ndarray] = field(repr=False)
    style: DomainStyle = field(repr=False)


@dataclass(eq=False)
class Federation:
    config: FederationConfig
    domains: list[DomainData]
    part_bases: np.ndarray = field(repr=False)
    camera_fields: np.ndarray = field(repr=False)


@dataclass(eq=False)
class ClientShard:
    client_id: int
    domain: int
    samples: list[Sample]


def partition_parts(s: Sample | np.ndarray) -> PartViews:
    pixels = s.pixels if isinstance(s, Sample) else np.asarray(s)
    h = pixels.shape[0]
    if h % NUM_PARTS:
        raise ValueError(f"image height {h} is not divisible by 3")
    k = h // NUM_PARTS
    return PartViews(pixels[:k], pixels[k : 2 * k], pixels[2 * k :])


def _draw_rendering(cfg: FederationConfig, rng: np.random.Generator):
    strip_pixels = cfg.strip_height * cfg.image_width
    bases = rng.standard_normal((NUM_PARTS, strip_pixels, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
    cameras = rng.standard_normal((cfg.cameras_per_domain, cfg.image_height, cfg.image_width))
    return bases, cameras


def _draw_style(cfg: FederationConfig, rng: np.random.Generator) -> DomainStyle:
    shape = (cfg.image_height, cfg.image_width)
    return DomainStyle(gain=0.5 * rng.standard_normal(shape), bias=rng.standard_normal(shape))


def render(part_latents: np.ndarray, part_bases: np.ndarray, style: DomainStyle,
           camera_field: np.ndarray, cfg: FederationConfig) -> np.ndarray:
    """Noise-free, occlusion-free pixels for a (3, latent_dim) part latent."""
    strips = [(part_bases[j] @ part_latents[j]).reshape(cfg.strip_height, cfg.image_width)
              for j in range(NUM_PARTS)]
    x = np.vstack(strips) + cfg.camera_shift * camera_field
    s = cfg.domain_shift_strength
    return (1.0 + s * style.gain) * x + s * style.bias


def _split_query_gallery(samples: list[Sample]) -> tuple[list[Sample], list[Sample]]:
    # first sample of each (identity, camera) pair is a query, the rest gallery
    query, gallery = [], []
    seen: set[tuple[int, int]] = set()
    for s in samples:
        key = (s.identity, s.camera)
        if key not in seen:
            seen.add(key)
            query.append(s)
        else:
            gallery.append(s)
    return query, gallery


def generate_federation(cfg: FederationConfig) -> Federation:
    """Generate every domain of the federation from one seeded stream."""
    rng = np.random.default_rng(cfg.seed)
    bases, camera_fields = _draw_rendering(cfg, rng)
    occlusion = cfg.occlusion_table()
    domains = []
    for d in range(cfg.num_domains):
        style = _draw_style(cfg, rng)
        samples = []
        latents = {}
        for i in range(cfg.identities_per_domain):
            identity = d * cfg.identities_per_domain + i
            z = rng.standard_normal((NUM_PARTS, cfg.latent_dim))
            latents[identity] = z
            for j in range(cfg.samples_per_identity):
                camera = j % cfg.cameras_per_domain
                jitter = cfg.identity_jitter * rng.standard_normal(z.shape)
                noise = rng.standard_normal((cfg.image_height, cfg.image_width))
                occ_draw = rng.random(NUM_PARTS)
                pixels = render(z + jitter, bases, style, camera_fields[camera], cfg)
                pixels = pixels + cfg.feature_noise_sigma * noise
                for part in range(NUM_PARTS):
                    if occ_draw[part] < occlusion[d, part]:
                        k = cfg.strip_height
                        pixels[part * k : (part + 1) * k] = 0.0
                        break
                pixels.setflags(write=False)
                samples.append(Sample(pixels, identity, d, camera))
        query, gallery = _split_query_gallery(samples)
        domains.append(DomainData(d, samples, query, gallery, latents, style))
    return Federation(cfg, domains, bases, camera_fields)


def federation_split(domains: Sequence[DomainData], held_out: int) -> tuple[list[ClientShard], DomainData]:
    """One client per source domain; the held-out domain is kept for evaluation."""
    if len(domains) < 2:
        raise ConfigError("leave-one-domain-out needs at least two domains")
    if not 0 <= held_out < len(domains):
        raise ConfigError(f"held_out domain {held_out} out of range [0, {len(domains)})")
    sources = [dd for dd in domains if dd.domain != held_out]
    shards = [ClientShard(k, dd.domain, list(dd.train)) for k, dd in enumerate(sources)]
    return shards, domains[held_out]


def export_federation(fed: Federation, out_dir: str | Path) -> Path:
    """Write each sample as a raw little-endian float64 file plus a JSON manifest."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    cfg = fed.config
    entries = []
    for dd in fed.domains:
        query_ids = {id(s) for s in dd.query}
        for n, s in enumerate(dd.train):
            name = f"samples/d{dd.domain:02d}_{n:05d}.bin"
            (out / name).write_bytes(np.ascontiguousarray(s.pixels, dtype="<f8").tobytes())
            entries.append({
                "file": name,
                "domain": s.domain,
                "identity": s.identity,
                "camera": s.camera,
                "eval_split": "query" if id(s) in query_ids else "gallery",
            })
    manifest = {
        "format": "raw little-endian float64, row-major",
        "shape": [cfg.image_height, cfg.image_width],
        "config": asdict(cfg),
        "samples": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_exported(out_dir: str | Path) -> list[Sample]:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    shape = tuple(manifest["shape"])
    return [
        Sample(np.frombuffer((out / e["file"]).read_bytes(), dtype="<f8").reshape(shape),
               e["identity"], e["domain"], e["camera"])
        for e in manifest["samples"]
    ]
