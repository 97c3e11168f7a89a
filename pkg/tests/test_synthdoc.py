import hashlib

import numpy as np
import pytest
from scipy import stats

from docsegtr.errors import ConfigError, FormatError
from docsegtr.ppm import read_ppm, to_bytes, write_ppm
from docsegtr.synthdoc import (
    ANNOTATION_NAME,
    META_NAME,
    GenConfig,
    SplitMix64,
    generate_sample,
    read_dataset,
    write_dataset,
)


def test_splitmix_reference_values():
    # first outputs for seed 0 of the published SplitMix64 generator
    g = SplitMix64(0)
    assert [g.next() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_deterministic():
    cfg = GenConfig(seed=7)
    a, b = generate_sample(cfg, 3), generate_sample(cfg, 3)
    np.testing.assert_array_equal(a.image, b.image)
    assert len(a.instances) == len(b.instances)
    for x, y in zip(a.instances, b.instances):
        assert x.class_id == y.class_id
        np.testing.assert_array_equal(x.mask, y.mask)


def test_different_indices_differ():
    cfg = GenConfig(seed=7)
    assert not np.array_equal(generate_sample(cfg, 0).image, generate_sample(cfg, 1).image)


@pytest.mark.parametrize("seed", [0, 1, 99])
def test_sample_contract(seed):
    cfg = GenConfig(128, 128, 2, 5, seed)
    for idx in range(20):
        s = generate_sample(cfg, idx)
        assert len(s.instances) <= cfg.max_instances
        assert s.image.shape == (3, 128, 128) and s.image.min() >= 0 and s.image.max() <= 1
        for k, a in enumerate(s.instances):
            assert a.mask.any() and 0 <= a.class_id < 5
            for b in s.instances[k + 1:]:
                assert not np.any(a.mask & b.mask)


def test_instance_count_usually_reaches_minimum():
    cfg = GenConfig(128, 128, 2, 5, 3)
    counts = [len(generate_sample(cfg, i).instances) for i in range(50)]
    assert min(counts) >= 1 and sum(c >= 2 for c in counts) >= 45


def test_class_frequencies_near_uniform():
    # default config: about 6000 placed instances, so a 10% band around 0.2
    # sits near four standard deviations out
    cfg = GenConfig(seed=5)
    counts = np.zeros(5)
    for i in range(1000):
        for inst in generate_sample(cfg, i).instances:
            counts[inst.class_id] += 1
    freq = counts / counts.sum()
    assert np.all(np.abs(freq - 0.2) <= 0.02), freq
    assert stats.chisquare(counts).pvalue > 1e-3, counts


def test_config_validation():
    with pytest.raises(ConfigError):
        GenConfig(100, 128)
    with pytest.raises(ConfigError):
        GenConfig(min_instances=3, max_instances=2)


def _tree_hash(d):
    h = hashlib.sha256()
    for p in sorted(d.iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


class TestDatasetFiles:
    def test_roundtrip(self, tmp_path):
        cfg = GenConfig(64, 64, 1, 3, seed=2)
        written = write_dataset(cfg, 4, tmp_path / "d")
        back = read_dataset(tmp_path / "d")
        assert len(back) == 4
        for a, b in zip(written, back):
            assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-12
            assert [i.class_id for i in a.instances] == [i.class_id for i in b.instances]
            for x, y in zip(a.instances, b.instances):
                np.testing.assert_array_equal(x.mask, y.mask)

    def test_layout(self, tmp_path):
        write_dataset(GenConfig(64, 64, seed=1), 5, tmp_path / "d")
        names = sorted(p.name for p in (tmp_path / "d").iterdir())
        assert names == [f"{i:06d}.ppm" for i in range(5)] + [ANNOTATION_NAME, META_NAME]
        lines = (tmp_path / "d" / ANNOTATION_NAME).read_text().splitlines()
        assert lines[0] == "docsegtr-eval v1" and len(lines) == 6

    def test_stable_hash(self, tmp_path):
        cfg = GenConfig(64, 64, seed=11)
        write_dataset(cfg, 3, tmp_path / "a")
        write_dataset(cfg, 3, tmp_path / "b")
        assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")

    def test_refuses_non_empty_dir(self, tmp_path):
        cfg = GenConfig(64, 64)
        write_dataset(cfg, 1, tmp_path / "d")
        with pytest.raises(FileExistsError):
            write_dataset(cfg, 1, tmp_path / "d")
        write_dataset(cfg, 2, tmp_path / "d", force=True)
        assert len(read_dataset(tmp_path / "d")) == 2

    def test_corrupt_meta(self, tmp_path):
        write_dataset(GenConfig(64, 64), 1, tmp_path / "d")
        (tmp_path / "d" / META_NAME).write_text("count=abc\n")
        with pytest.raises(FormatError, match="meta.txt"):
            read_dataset(tmp_path / "d")


class TestPPM:
    def test_roundtrip(self, tmp_path, rng):
        img = np.rint(rng.random((3, 5, 7)) * 255) / 255
        write_ppm(tmp_path / "x.ppm", img)
        np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), img)

    def test_header(self):
        assert to_bytes(np.zeros((3, 2, 4))).startswith(b"P6\n4 2\n255\n")

    def test_comment_in_header(self, tmp_path):
        (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([255, 0, 0]))
        np.testing.assert_array_equal(read_ppm(tmp_path / "c.ppm")[:, 0, 0], [1.0, 0.0, 0.0])

    @pytest.mark.parametrize("payload", [b"P3\n1 1\n255\n0 0 0", b"P6\n2 2\n255\n\x00\x00", b"garbage"])
    def test_malformed(self, tmp_path, payload):
        (tmp_path / "bad.ppm").write_bytes(payload)
        with pytest.raises(FormatError):
            read_ppm(tmp_path / "bad.ppm")


def _boxes(sample):
    out = []
    for g in sample.instances:
        rr, cc = np.nonzero(g.mask)
        out.append((g.class_id, rr.min(), cc.min(), rr.max() + 1 - rr.min(), cc.max() + 1 - cc.min()))
    return out


class TestLayout:
    samples = [generate_sample(GenConfig(seed=s), i) for s in (0, 1000) for i in range(40)]

    def test_region_sizes(self):
        for s in self.samples:
            for cls, _, _, h, w in _boxes(s):
                assert 16 <= w <= 64 and h % 4 == 0 and w % 4 == 0
                assert (8 <= h <= 12) if cls == 1 else (16 <= h <= 48)

    def test_margin_and_gap(self):
        for s in self.samples:
            boxes = _boxes(s)
            for _, y, x, h, w in boxes:
                assert y >= 4 and x >= 4 and y + h <= 124 and x + w <= 124
            for a in range(len(boxes)):
                for b in range(a + 1, len(boxes)):
                    _, y0, x0, h0, w0 = boxes[a]
                    _, y1, x1, h1, w1 = boxes[b]
                    assert y1 >= y0 + h0 + 4 or y0 >= y1 + h1 + 4 or x1 >= x0 + w0 + 4 or x0 >= x1 + w1 + 4

    def test_some_blocks_follow_a_column(self):
        stacked = 0
        for s in self.samples:
            boxes = _boxes(s)
            stacked += sum(1 for a in boxes for b in boxes if b[1] == a[1] + a[3] + 4 and b[2] == a[2] and b[4] == a[4])
        assert stacked >= len(self.samples) // 4

    def test_centroid_cells_distinct_unless_two_titles(self):
        from docsegtr.training import centroid_cell

        for s in self.samples:
            cells = [(g.class_id, centroid_cell(g.mask, 8)) for g in s.instances]
            for a in range(len(cells)):
                for b in range(a + 1, len(cells)):
                    if cells[a][1] == cells[b][1]:
                        assert cells[a][0] == cells[b][0] == 1
