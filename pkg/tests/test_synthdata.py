import hashlib

import numpy as np
import pytest

from dcp.numerics import ContractError
from dcp.synthdata import (DatasetSpec, apply_shift, build, generate, load, make_world, rotate, sample_few_shot,
                           sample_pairs, world_for)


def _digest(path):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(path.iterdir())}


@pytest.fixture(scope="module")
def ds():
    return build(DatasetSpec(), 0)


def test_noise_free_classes_are_constant():
    d = build(DatasetSpec(noise_std=0.0), 3)
    for k in range(d.spec.K):
        block = d.train_patches[d.train_labels == k]
        assert np.all(block == block[0])


def test_generation_is_byte_identical(tmp_path):
    a = generate(DatasetSpec(train_per_class=4, test_per_class=3), 5, tmp_path / "a")
    generate(DatasetSpec(train_per_class=4, test_per_class=3), 5, tmp_path / "b")
    assert _digest(tmp_path / "a" / "synth") == _digest(tmp_path / "b" / "synth")
    assert a.spec.name == "synth"


def test_disk_roundtrip_is_lossless(tmp_path):
    d = generate(DatasetSpec(train_per_class=5, test_per_class=4), 1, tmp_path)
    back = load(tmp_path / "synth")
    assert back.spec == d.spec and back.class_tokens == d.class_tokens and back.seed == d.seed
    assert np.array_equal(back.train_patches, d.train_patches)
    assert np.array_equal(back.test_patches, d.test_patches)
    assert np.array_equal(back.train_labels, d.train_labels)
    assert np.array_equal(back.test_labels, d.test_labels)


def test_load_missing_dir_names_path(tmp_path):
    with pytest.raises(OSError, match="nowhere"):
        load(tmp_path / "nowhere")


def test_default_task_is_linearly_separable(ds):
    assert ds.lsq_train_accuracy >= 0.99


def test_class_names_are_distinct_and_valid(ds):
    toks = [t for name in ds.class_tokens for t in name]
    assert len(set(toks)) == len(toks)
    assert all(5 <= t < ds.spec.vocab_size for t in toks)


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(K=40, name_len=2)
    with pytest.raises(ValueError):
        DatasetSpec(latent_dim=15)
    with pytest.raises(ValueError):
        DatasetSpec(shift_angle_deg=float("inf"))


def test_exhaustive_sampling_takes_the_whole_pool(ds):
    task = sample_few_shot(ds, 32, 0)
    assert sorted(task.train_indices) == list(range(ds.n_train))


@pytest.mark.parametrize("shots", [1, 2, 4, 8, 16])
def test_episode_structure(ds, shots):
    task = sample_few_shot(ds, shots, 1)
    labels = ds.train_labels[list(task.train_indices)]
    assert np.all(np.bincount(labels, minlength=8) == shots)
    assert not set(task.train_indices) & set(task.test_indices)
    assert task == sample_few_shot(ds, shots, 1)


def test_seeds_give_different_one_shot_episodes(ds):
    eps = [sample_few_shot(ds, 1, s).train_indices for s in (0, 1, 2)]
    assert len(set(eps)) == 3
    # probability that two seeds collide on all 8 classes is 32^-8; check empirically over many seeds
    many = {sample_few_shot(ds, 1, s).train_indices for s in range(200)}
    assert len(many) == 200


def test_insufficient_pool(ds):
    with pytest.raises(ContractError):
        sample_few_shot(ds, 33, 0)


def test_zero_shift_is_identity(ds):
    s = apply_shift(ds, 0.0, 1.0)
    assert np.array_equal(s.train_patches, ds.train_patches) and np.array_equal(s.test_patches, ds.test_patches)


def test_shift_keeps_labels_and_names(ds):
    s = apply_shift(ds, 30.0, 2.0)
    assert s.class_tokens == ds.class_tokens
    assert np.array_equal(s.test_labels, ds.test_labels)
    assert not np.allclose(s.test_patches, ds.test_patches)


def test_rotation_is_orthogonal():
    w = world_for(DatasetSpec())
    z = np.random.default_rng(0).normal(size=(5, 16))
    r = rotate(w, z, 37.0)
    np.testing.assert_allclose(np.linalg.norm(r, axis=1), np.linalg.norm(z, axis=1), rtol=1e-12)
    np.testing.assert_allclose(rotate(w, r, -37.0), z, atol=1e-12)
    assert np.array_equal(rotate(w, z, 0.0), z)


def test_world_is_cached_and_frozen():
    spec = DatasetSpec()
    assert world_for(spec) is make_world(0, 64, 16, 16, 12)
    with pytest.raises(ValueError):
        world_for(spec).token_latents[0, 0] = 1.0


def test_pretraining_pairs_are_deterministic():
    spec = DatasetSpec()
    a = sample_pairs(world_for(spec), spec, np.random.default_rng(0), 6)
    b = sample_pairs(world_for(spec), spec, np.random.default_rng(0), 6)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    assert a[0].shape == (6, 16, 12) and all(len(t) == 2 for t in a[1])
