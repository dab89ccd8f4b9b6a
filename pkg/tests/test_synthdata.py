from collections import Counter
import dataclasses
import json

import numpy as np
import pytest

from fedarks.synthdata import (
    ConfigError,
    FederationConfig,
    Sample,
    export_federation,
    federation_split,
    generate_federation,
    load_exported,
    partition_parts,
    render,
)


def _bytes(fed):
    return b"".join(s.pixels.tobytes() + bytes([s.identity, s.camera]) for dd in fed.domains for s in dd.train)


def test_deterministic_given_seed(tiny_fed_cfg):
    assert _bytes(generate_federation(tiny_fed_cfg)) == _bytes(generate_federation(tiny_fed_cfg))
    other = dataclasses.replace(tiny_fed_cfg, seed=tiny_fed_cfg.seed + 1)
    assert _bytes(generate_federation(other)) != _bytes(generate_federation(tiny_fed_cfg))


def test_counts_and_uniform_labels():
    cfg = FederationConfig(num_domains=3, identities_per_domain=10, samples_per_identity=4, seed=1)
    fed = generate_federation(cfg)
    samples = [s for dd in fed.domains for s in dd.train]
    assert len(samples) == 120
    assert set(Counter(s.identity for s in samples).values()) == {4}
    assert Counter(s.domain for s in samples) == {0: 40, 1: 40, 2: 40}


def test_identities_disjoint_across_domains(tiny_fed_cfg):
    fed = generate_federation(tiny_fed_cfg)
    sets = [{s.identity for s in dd.train} for dd in fed.domains]
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            assert not sets[i] & sets[j]


def test_every_identity_seen_by_two_cameras(tiny_fed_cfg):
    fed = generate_federation(tiny_fed_cfg)
    cams: dict[int, set] = {}
    for dd in fed.domains:
        for s in dd.train:
            cams.setdefault(s.identity, set()).add(s.camera)
    assert all(len(c) >= 2 for c in cams.values())


def test_query_gallery_split(tiny_fed_cfg):
    fed = generate_federation(tiny_fed_cfg)
    for dd in fed.domains:
        assert len(dd.query) + len(dd.gallery) == len(dd.train)
        keys = Counter((s.identity, s.camera) for s in dd.query)
        assert set(keys.values()) == {1}
        for q in dd.query:
            assert any(g.identity == q.identity and g.camera != q.camera for g in dd.gallery)


def test_zero_shift_renders_identically_across_domains(tiny_fed_cfg):
    cfg = dataclasses.replace(tiny_fed_cfg, domain_shift_strength=0.0, feature_noise_sigma=0.0,
                              part_occlusion_prob=0.0, identity_jitter=0.0)
    fed = generate_federation(cfg)
    z = np.random.default_rng(0).standard_normal((3, cfg.latent_dim))
    renders = [render(z, fed.part_bases, dd.style, fed.camera_fields[0], cfg) for dd in fed.domains]
    for r in renders[1:]:
        assert np.array_equal(r, renders[0])
    # with no jitter, noise or occlusion every sample is exactly its identity render
    for dd in fed.domains:
        for s in dd.train:
            want = render(dd.part_latents[s.identity], fed.part_bases, dd.style, fed.camera_fields[s.camera], cfg)
            assert np.array_equal(s.pixels, want)


def test_shift_distance_strictly_increasing(tiny_fed_cfg):
    z = np.random.default_rng(1).standard_normal((3, tiny_fed_cfg.latent_dim))
    dists = []
    for strength in (0.0, 0.3, 0.6, 1.2):
        cfg = dataclasses.replace(tiny_fed_cfg, domain_shift_strength=strength)
        fed = generate_federation(cfg)
        a = render(z, fed.part_bases, fed.domains[0].style, fed.camera_fields[0], cfg)
        b = render(z, fed.part_bases, fed.domains[1].style, fed.camera_fields[0], cfg)
        dists.append(float(np.mean(np.abs(a - b))))
    assert dists[0] == 0.0
    assert all(x < y for x, y in zip(dists, dists[1:]))


def test_occlusion_zeroes_the_domain_part():
    cfg = FederationConfig(num_domains=3, identities_per_domain=4, samples_per_identity=4,
                           image_height=6, image_width=4, part_occlusion_prob=1.0, seed=2)
    fed = generate_federation(cfg)
    for dd in fed.domains:
        for s in dd.train:
            strips = partition_parts(s).strips()
            zero = [j for j, strip in enumerate(strips) if not strip.any()]
            assert zero == [dd.domain % 3]


def test_occlusion_table_form():
    table = ((0.0, 0.0, 1.0), (0.0, 0.0, 0.0))
    cfg = FederationConfig(num_domains=2, identities_per_domain=2, samples_per_identity=4,
                           image_height=6, image_width=2, part_occlusion_prob=table)
    fed = generate_federation(cfg)
    assert all(not partition_parts(s).lower.any() for s in fed.domains[0].train)
    assert all(partition_parts(s).lower.any() for s in fed.domains[1].train)


@pytest.mark.parametrize("kwargs", [
    {"identities_per_domain": 1},
    {"image_height": 10},
    {"cameras_per_domain": 1},
    {"part_occlusion_prob": 1.5},
    {"feature_noise_sigma": -0.1},
    {"samples_per_identity": 3},
])
def test_config_errors(kwargs):
    with pytest.raises(ConfigError):
        FederationConfig(**kwargs)


def test_partition_parts():
    pixels = np.arange(12 * 5, dtype=float).reshape(12, 5)
    pv = partition_parts(Sample(pixels, 0, 0, 0))
    assert np.array_equal(pv.head, pixels[0:4])
    assert np.array_equal(pv.torso, pixels[4:8])
    assert np.array_equal(pv.lower, pixels[8:12])
    assert np.vstack(pv.strips()).tobytes() == pixels.tobytes()
    zero = partition_parts(np.zeros((6, 2)))
    assert all(not s.any() for s in zero.strips())
    with pytest.raises(ValueError):
        partition_parts(np.zeros((7, 2)))


def test_federation_split():
    cfg = FederationConfig(num_domains=4, identities_per_domain=2, samples_per_identity=4,
                           image_height=3, image_width=2)
    fed = generate_federation(cfg)
    shards, target = federation_split(fed.domains, 3)
    assert [s.domain for s in shards] == [0, 1, 2]
    assert [s.client_id for s in shards] == [0, 1, 2]
    assert target.domain == 3
    for held in range(4):
        shards, target = federation_split(fed.domains, held)
        assert {s.domain for s in shards} | {target.domain} == {0, 1, 2, 3}
        assert target.domain not in {s.domain for s in shards}
    with pytest.raises(ConfigError):
        federation_split(fed.domains, 4)
    with pytest.raises(ConfigError):
        federation_split(fed.domains, -1)


def test_two_domain_split_is_single_client():
    cfg = FederationConfig(num_domains=2, identities_per_domain=2, samples_per_identity=4,
                           image_height=3, image_width=2)
    shards, target = federation_split(generate_federation(cfg).domains, 1)
    assert len(shards) == 1 and target.domain == 1


def test_export_roundtrip(tmp_path, tiny_fed_cfg):
    fed = generate_federation(tiny_fed_cfg)
    manifest_path = export_federation(fed, tmp_path)
    manifest = json.loads(manifest_path.read_text())
    assert len(manifest["samples"]) == sum(len(dd.train) for dd in fed.domains)
    back = load_exported(tmp_path)
    orig = [s for dd in fed.domains for s in dd.train]
    for a, b in zip(orig, back):
        assert a.pixels.tobytes() == b.pixels.tobytes()
        assert (a.identity, a.domain, a.camera) == (b.identity, b.domain, b.camera)
    assert Counter(e["eval_split"] for e in manifest["samples"])["query"] == sum(len(dd.query) for dd in fed.domains)
