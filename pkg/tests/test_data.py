import json
from collections import Counter

import numpy as np
import pytest

from claps import data
from claps.config import SynthConfig
from claps.data import ManifestError


@pytest.fixture(scope="module")
def default_ds():
    return data.generate(SynthConfig(), seed=11)


@pytest.fixture(scope="module")
def small_ds():
    return data.generate(SynthConfig(counts={"CFP": 12, "OCT": 8}), seed=5)


class TestGenerate:
    def test_deterministic(self, default_ds):
        again = data.generate(SynthConfig(), seed=11)
        assert len(default_ds) == 110
        assert again == default_ds

    def test_seed_changes_images(self, small_ds):
        other = data.generate(SynthConfig(counts={"CFP": 12, "OCT": 8}), seed=6)
        assert not np.array_equal(other.samples[0].image, small_ds.samples[0].image)

    def test_tight_box_law(self, default_ds):
        for s in default_ds.samples:
            assert len(s.gt_boxes) == len(s.gt_masks)
            for b, m in zip(s.gt_boxes, s.gt_masks):
                assert m.shape == s.image.shape
                ys, xs = np.nonzero(m)
                assert (b.x_min, b.y_min, b.x_max, b.y_max) == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)

    def test_tight_box_helper(self):
        m = np.zeros((10, 10), bool)
        m[2:5, 3:9] = True
        assert data.tight_box(m).as_tuple() == (3, 2, 9, 5)

    def test_images_are_gray_uint8(self, small_ds):
        for s in small_ds.samples:
            assert s.image.dtype == np.uint8 and s.image.shape == (64, 64)

    def test_default_imbalance_and_frequencies(self, default_ds):
        assert Counter(s.modality for s in default_ds.samples) == {"CFP": 100, "OCT": 10}
        assert data.frequencies(default_ds) == {"CFP": 90, "OCT": 9}

    def test_frequency_table_is_a_recount(self, small_ds):
        for split in ("train", "test"):
            recount = Counter(s.modality for s in small_ds.split(split))
            assert small_ds.frequencies(split) == dict(recount)

    def test_empty_modality_absent(self):
        ds = data.generate(SynthConfig(counts={"CFP": 4, "OCT": 1}, train_fraction=0.5), seed=0)
        assert ds.frequencies("train") == {"CFP": 2}

    def test_splits_disjoint_and_cover(self, small_ds):
        ids = [{id(s) for s in small_ds.split(n)} for n in ("train", "val", "test")]
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
        assert sum(map(len, ids)) == len(small_ds)

    def test_prompt_is_category(self, small_ds):
        assert all(s.prompt == s.category for s in small_ds.samples)

    def test_lesion_intensity_differs_by_modality(self, default_ds):
        for cat in ("lesion", "scar"):
            means = data.lesion_intensity_means([s for s in default_ds.samples if s.category == cat])
            assert abs(means["CFP"] - means["OCT"]) > 50, (cat, means)

    def test_ambiguous_suite_keeps_the_intensity_gap(self):
        ds = data.generate(SynthConfig(counts={"CFP": 40, "OCT": 40}, ambiguous=True), seed=2)
        for cat in ("lesion", "scar"):
            means = data.lesion_intensity_means([s for s in ds.samples if s.category == cat])
            assert abs(means["CFP"] - means["OCT"]) > 50

    def test_distractors_present(self, small_ds):
        # every image holds at least one non-target shape far from the background level
        for s in small_ds.samples:
            extreme = (s.image < 60) | (s.image > 200)
            outside = extreme & ~s.merged_mask
            assert outside.sum() > 20

    def test_invalid_configs(self):
        with pytest.raises(ValueError, match="image_size"):
            SynthConfig(image_size=32)
        with pytest.raises(ValueError, match="positive"):
            SynthConfig(counts={"CFP": 0})


class TestPersistence:
    def test_round_trip(self, default_ds, tmp_path):
        data.save(default_ds, tmp_path)
        back = data.load(tmp_path)
        assert back == default_ds
        assert back.frequencies() == default_ds.frequencies()

    def test_layout_and_manifest_schema(self, small_ds, tmp_path):
        data.save(small_ds, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["schema_version"] == 1
        assert manifest["modalities"] == ["CFP", "OCT"]
        rec = next(r for r in manifest["samples"] if r["masks"])
        i = manifest["samples"].index(rec)
        assert rec["image"] == f"images/{i:04d}.pgm"
        assert rec["masks"] == [f"masks/{i:04d}_{k}.pgm" for k in range(len(rec["boxes"]))]
        for box, mpath in zip(rec["boxes"], rec["masks"]):
            assert all(isinstance(v, int) for v in box)
            m = data.read_pgm(tmp_path / mpath) > 127
            assert data.tight_box(m).as_tuple() == tuple(box)

    def test_pgm_bytes(self, tmp_path):
        img = np.arange(12, dtype=np.uint8).reshape(3, 4)
        data.write_pgm(tmp_path / "a.pgm", img)
        raw = (tmp_path / "a.pgm").read_bytes()
        assert raw == b"P5\n4 3\n255\n" + img.tobytes()
        np.testing.assert_array_equal(data.read_pgm(tmp_path / "a.pgm"), img)

    def test_pgm_with_comment(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made elsewhere\n2 1\n255\n\x07\x08")
        np.testing.assert_array_equal(data.read_pgm(tmp_path / "c.pgm"), [[7, 8]])

    def test_pgm_wrong_maxval(self, tmp_path):
        (tmp_path / "d.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x01")
        with pytest.raises(ValueError, match="maxval"):
            data.read_pgm(tmp_path / "d.pgm")

    def _manifest(self, small_ds, tmp_path):
        data.save(small_ds, tmp_path)
        return json.loads((tmp_path / "manifest.json").read_text())

    def test_unregistered_modality_rejected(self, small_ds, tmp_path):
        m = self._manifest(small_ds, tmp_path)
        m["samples"][3]["modality"] = "ICGA"
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ManifestError, match=r"record 3: unregistered modality 'ICGA'"):
            data.load(tmp_path)

    def test_missing_file_names_path_and_record(self, small_ds, tmp_path):
        self._manifest(small_ds, tmp_path)
        (tmp_path / "images" / "0005.pgm").unlink()
        with pytest.raises(ManifestError, match=r"manifest.json record 5: missing file .*0005.pgm"):
            data.load(tmp_path)

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(ManifestError, match="malformed"):
            data.load(tmp_path)

    def test_box_mask_count_mismatch(self, small_ds, tmp_path):
        m = self._manifest(small_ds, tmp_path)
        i = next(k for k, r in enumerate(m["samples"]) if r["masks"])
        m["samples"][i]["boxes"].append([0, 0, 1, 1])
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ManifestError, match=f"record {i}"):
            data.load(tmp_path)

    def test_wrong_schema_version(self, small_ds, tmp_path):
        m = self._manifest(small_ds, tmp_path)
        m["schema_version"] = 2
        (tmp_path / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(ManifestError, match="schema_version"):
            data.load(tmp_path)


class TestSampler:
    def test_single_modality_and_coverage(self, small_ds):
        batches = data.epoch_batches(small_ds, 3, seed=1, epoch=0)
        assert all(len({s.modality for s in b}) == 1 for b in batches)
        emitted = Counter(id(s) for b in batches for s in b)
        assert emitted == Counter(id(s) for s in small_ds.split("train"))

    def test_deterministic_and_epoch_dependent(self, small_ds):
        ids = lambda bs: [[id(s) for s in b] for b in bs]
        a = data.epoch_batches(small_ds, 4, seed=3, epoch=0)
        assert ids(a) == ids(data.epoch_batches(small_ds, 4, seed=3, epoch=0))
        assert ids(a) != ids(data.epoch_batches(small_ds, 4, seed=3, epoch=1))

    def test_modality_order_shuffles_across_epochs(self, small_ds):
        orders = {tuple(b[0].modality for b in data.epoch_batches(small_ds, 4, seed=0, epoch=e))
                  for e in range(10)}
        assert len(orders) > 1

    def test_endless_stream(self, small_ds):
        it = data.batch_sampler(small_ds, 5, seed=0)
        per_epoch = len(data.epoch_batches(small_ds, 5, 0, 0))
        batches = [next(it) for _ in range(3 * per_epoch)]
        assert all(len({s.modality for s in b}) == 1 for b in batches)

    def test_bad_batch_size(self, small_ds):
        with pytest.raises(ValueError, match="batch_size"):
            data.epoch_batches(small_ds, 0, 0, 0)
