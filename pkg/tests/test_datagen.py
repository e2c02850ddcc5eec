import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from incgan.datagen import (
    MANIFEST,
    SPLITS,
    default_architectures,
    fingerprint_pattern,
    generate_architecture,
    generate_dataset,
    generate_sample,
    read_container,
    read_manifest,
    with_amplitude,
    write_container,
)
from incgan.errors import ConfigError, FormatError
from incgan.tensorio import decode, encode, read_tensor, write_tensor

ARCH0 = default_architectures(1)[0]


def population(spec, origin, n, seed=0, split="test"):
    return np.stack([generate_sample(spec, origin, split, i, seed) for i in range(n)]).astype(np.float64)


def matched_filter_accuracy(amplitude, n=250, seed=0):
    """Correlate with the period-2 checkerboard; threshold halfway between the class means."""
    spec = with_amplitude(ARCH0, amplitude)
    y, x = np.mgrid[0:32, 0:32]
    checker = ((-1.0) ** (x + y))[:, :, None]
    g = (population(spec, "G", n, seed) * checker).mean(axis=(1, 2, 3))
    r = (population(spec, "R", n, seed) * checker).mean(axis=(1, 2, 3))
    threshold = (g.mean() + r.mean()) / 2
    return ((g > threshold).sum() + (r <= threshold).sum()) / (2 * n)


def test_amplitude_zero_populations_match():
    spec = with_amplitude(ARCH0, 0.0)
    g, r = population(spec, "G", 500), population(spec, "R", 500)
    assert abs(g.mean() - r.mean()) < 0.01


def test_amplitude_one_matched_filter_separates():
    assert matched_filter_accuracy(1.0, n=250) > 0.99


def test_matched_filter_monotone_in_amplitude():
    for seed in range(3):
        accs = [matched_filter_accuracy(a, n=100, seed=seed) for a in (0.0, 0.25, 0.5, 1.0)]
        assert all(b >= a for a, b in zip(accs, accs[1:])), accs


def test_architecture_zero_fingerprint_has_two_pixel_period():
    pattern = fingerprint_pattern(ARCH0.fingerprint, 32, 3)
    np.testing.assert_allclose(pattern[:, :-2], pattern[:, 2:], atol=1e-12)
    np.testing.assert_allclose(pattern[:, :-1], -pattern[:, 1:], atol=1e-12)


def test_samples_are_reproducible_in_isolation():
    a = generate_sample(ARCH0, "G", "val", 17, run_seed=5)
    b = generate_sample(ARCH0, "G", "val", 17, run_seed=5)
    assert a.tobytes() == b.tobytes()
    assert a.dtype == np.float32 and a.min() >= -1 and a.max() <= 1
    assert not np.array_equal(a, generate_sample(ARCH0, "G", "val", 18, run_seed=5))
    assert not np.array_equal(a, generate_sample(ARCH0, "G", "val", 17, run_seed=6))


def test_architectures_are_distinct():
    specs = default_architectures(8)
    assert len({s.fingerprint.frequency for s in specs}) == 8
    assert len({(s.smoothing, s.gains) for s in specs}) == 8
    with pytest.raises(ConfigError):
        default_architectures(9)
    with pytest.raises(ConfigError):
        default_architectures(2, amplitude=1.5)


def test_splits_are_disjoint_and_balanced():
    counts = {"train": 5, "val": 3, "test": 4}
    data = generate_architecture(ARCH0, counts, seed=0, size=8)
    for origin in ("G", "R"):
        seen = set()
        for split in SPLITS:
            block = data.block(0, origin, split)
            assert len(block) == counts[split]
            digests = {img.tobytes() for img in block.images}
            assert len(digests) == counts[split]
            assert not seen & digests
            seen |= digests
    with pytest.raises(ConfigError):
        generate_architecture(ARCH0, {"train": 1, "val": 0, "test": 1}, seed=0)


@pytest.fixture
def container(tmp_path):
    data = generate_dataset(default_architectures(2), {"train": 3, "val": 2, "test": 2}, seed=1, size=8)
    write_container(data, tmp_path / "data")
    return data, tmp_path / "data"


def test_container_round_trip_is_lossless(container):
    data, root = container
    back = read_container(root)
    assert sorted(back.blocks) == sorted(data.blocks)
    for key, block in data.blocks.items():
        assert back.blocks[key].paths == block.paths
        assert back.blocks[key].images.tobytes() == block.images.tobytes()


def test_container_rewrite_is_identical(container, tmp_path):
    data, root = container
    write_container(data, tmp_path / "again")
    assert (root / MANIFEST).read_bytes() == (tmp_path / "again" / MANIFEST).read_bytes()


def test_truncated_tensor_is_format_error(container):
    _, root = container
    rel = read_manifest(root)[0][0]
    blob = (root / rel).read_bytes()
    (root / rel).write_bytes(blob[:-5])
    with pytest.raises(FormatError, match="truncated"):
        read_container(root)


def test_unknown_split_token_names_the_line(container):
    _, root = container
    lines = (root / MANIFEST).read_text().splitlines()
    lines[3] = lines[3].replace(",train", ",holdout")
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError, match=f"{MANIFEST}:4"):
        read_container(root)


def test_manifest_field_errors(tmp_path):
    for line in ("a.iltf,0,G", "a.iltf,x,G,train", "a.iltf,0,Q,train"):
        (tmp_path / MANIFEST).write_text(f"# header\n{line}\n")
        with pytest.raises(FormatError, match=":2"):
            read_manifest(tmp_path)
    (tmp_path / MANIFEST).write_text("missing.iltf,0,G,train\n")
    with pytest.raises(FormatError, match="does not resolve"):
        read_container(tmp_path)


# ------------------------------------------------------------------ tensor file format

def test_tensor_header_layout():
    blob = encode(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert blob[:4] == b"ILTF"
    assert struct.unpack("<IBB", blob[4:10]) == (1, 1, 2)
    assert struct.unpack("<II", blob[10:18]) == (2, 3)
    assert np.frombuffer(blob[18:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_tensor_round_trip(array):
    back = decode(encode(array))
    assert back.shape == array.shape
    assert back.tobytes() == np.ascontiguousarray(array).tobytes()


@pytest.mark.parametrize(
    "mutate,message",
    [
        (lambda b: b"ILTX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
        (lambda b: b[:8] + b"\x07" + b[9:], "dtype"),
        (lambda b: b[:12], "truncated"),
        (lambda b: b[:-1], "truncated"),
    ],
)
def test_tensor_decode_errors(tmp_path, mutate, message):
    path = tmp_path / "t.iltf"
    write_tensor(path, np.ones((2, 2), np.float32))
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError, match=message) as err:
        read_tensor(path)
    assert "t.iltf" in str(err.value) and "offset" in str(err.value)
