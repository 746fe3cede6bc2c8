import json

import numpy as np
import pytest
import torch

from fanfill.data import Frame, FrameRecord, make_synthetic_dataset
from fanfill.geometry import APEX_TOP, ConeSpec, cut_region_mask, make_cone_mask
from fanfill.networks import Checkpoint, Discriminator, Generator
from fanfill.outpaint import batch_outpaint, load_index, outpaint


def _checkpoint(resolution=(64, 64), seed=1):
    torch.manual_seed(seed)
    gen, disc = Generator(), Discriminator()
    return Checkpoint(
        g_config=gen.config,
        d_config=disc.config,
        g_state=gen.state_dict(),
        d_state=disc.state_dict(),
        opt_g_state=None,
        opt_d_state=None,
        step=0,
        resolution=resolution,
        seed=seed,
    )


def _cone_masked_frame(spec, seed=0):
    rng = np.random.default_rng(seed)
    pixels = (rng.random((spec.height, spec.width)).astype(np.float32)
              * make_cone_mask(spec))
    record = FrameRecord("p", "f", path=None, split="test", cone=spec)
    return Frame(pixels=pixels, record=record)


class TestOutpaint:
    def test_identity_when_target_equals_input_spread(self):
        spec = ConeSpec(32, 0, 80.0, APEX_TOP, 64, 64)
        frame = _cone_masked_frame(spec)
        extended, filled = outpaint(frame, _checkpoint(), 80.0)
        np.testing.assert_array_equal(extended, frame.pixels)
        assert filled.sum() == 0

    def test_known_pixels_preserved_bit_exactly(self):
        spec = ConeSpec(32, 0, 40.0, APEX_TOP, 64, 64)
        frame = _cone_masked_frame(spec, seed=3)
        extended, filled = outpaint(frame, _checkpoint(), 90.0)
        retained = make_cone_mask(spec).astype(bool)
        np.testing.assert_array_equal(extended[retained], frame.pixels[retained])

    def test_footprint_closure(self):
        spec = ConeSpec(32, 0, 40.0, APEX_TOP, 64, 64)
        frame = _cone_masked_frame(spec)
        _, filled = outpaint(frame, _checkpoint(), 90.0)
        retained = make_cone_mask(spec)
        full = make_cone_mask(spec.with_spread(90.0))
        assert (filled & retained).sum() == 0
        np.testing.assert_array_equal(filled | retained, full)

    def test_ten_degree_fan_to_ninety(self):
        # 10 deg input widened to 90: the fill spans 40 deg per side.
        spec = ConeSpec(32, 0, 10.0, APEX_TOP, 64, 64)
        frame = _cone_masked_frame(spec)
        _, filled = outpaint(frame, _checkpoint(), 90.0)
        expected = cut_region_mask(make_cone_mask(spec.with_spread(90.0)), make_cone_mask(spec))
        np.testing.assert_array_equal(filled, expected)
        assert filled.sum() > 0

    def test_narrower_target_rejected(self):
        spec = ConeSpec(32, 0, 80.0, APEX_TOP, 64, 64)
        with pytest.raises(ValueError, match="narrower"):
            outpaint(_cone_masked_frame(spec), _checkpoint(), 60.0)

    def test_generated_values_in_unit_interval(self):
        spec = ConeSpec(32, 0, 40.0, APEX_TOP, 64, 64)
        extended, filled = outpaint(_cone_masked_frame(spec), _checkpoint(), 90.0)
        assert extended.min() >= 0.0 and extended.max() <= 1.0


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("bo") / "d"
    return make_synthetic_dataset(4, 2, seed=13, out=root,
                                  image_size=(64, 64), split_fraction=0.5)


class TestBatchOutpaint:

    def test_quartets_plus_index(self, dataset, tmp_path):
        report = batch_outpaint(dataset, _checkpoint(), 15.0, tmp_path / "out")
        n = len(dataset.split("test"))
        assert report["n_rows"] == n
        pngs = list((tmp_path / "out").rglob("*.png"))
        assert len(pngs) == 4 * n
        index = json.loads((tmp_path / "out" / "index.json").read_text())
        assert len(index["rows"]) == n
        assert index["errors"] == []
        for row in index["rows"]:
            assert set(row) >= {"frame_id", "gt", "input", "output", "filled_mask", "cut_deg", "cone"}

    def test_zero_cut_outputs_equal_inputs(self, dataset, tmp_path):
        batch_outpaint(dataset, _checkpoint(), 0.0, tmp_path / "out")
        index = load_index(tmp_path / "out" / "index.json")
        from PIL import Image

        for row in index["rows"]:
            out = np.asarray(Image.open(row["output"]))
            inp = np.asarray(Image.open(row["input"]))
            filled = np.asarray(Image.open(row["filled_mask"]))
            np.testing.assert_array_equal(out, inp)
            assert filled.sum() == 0

    def test_retained_pixels_bit_exact_in_pngs(self, dataset, tmp_path):
        batch_outpaint(dataset, _checkpoint(), 23.0, tmp_path / "out")
        index = load_index(tmp_path / "out" / "index.json")
        from PIL import Image

        for row in index["rows"]:
            out = np.asarray(Image.open(row["output"]))
            inp = np.asarray(Image.open(row["input"]))
            filled = np.asarray(Image.open(row["filled_mask"])) > 127
            np.testing.assert_array_equal(out[~filled], inp[~filled])

    def test_bad_frame_collected_not_fatal(self, tmp_path):
        manifest = make_synthetic_dataset(4, 1, seed=2, out=tmp_path / "d",
                                          image_size=(64, 64), split_fraction=0.5)
        victim = manifest.split("test")[0]
        victim.path.unlink()
        report = batch_outpaint(manifest, _checkpoint(), 15.0, tmp_path / "out")
        assert len(report["errors"]) == 1
        assert report["n_rows"] == len(manifest.split("test")) - 1

    def test_multiple_cuts_in_one_index(self, dataset, tmp_path):
        # Fans narrower than 80 deg cannot take a 40 deg side cut; those rows
        # land in the collected errors instead of aborting the batch.
        report = batch_outpaint(dataset, _checkpoint(), [15.0, 40.0], tmp_path / "out")
        index = load_index(tmp_path / "out" / "index.json")
        cuts = {row["cut_deg"] for row in index["rows"]}
        assert cuts == {15.0, 40.0}
        assert report["n_rows"] + len(report["errors"]) == 2 * len(dataset.split("test"))
        assert all("too large" in e["error"] for e in report["errors"])

    def test_empty_test_split_rejected(self, tmp_path):
        manifest = make_synthetic_dataset(2, 1, seed=2, out=tmp_path / "d",
                                          image_size=(64, 64), split_fraction=1.0)
        with pytest.raises(ValueError, match="empty test split"):
            batch_outpaint(manifest, _checkpoint(), 15.0, tmp_path / "out")

    def test_save_raw_adds_uncomposited_outputs(self, dataset, tmp_path):
        batch_outpaint(dataset, _checkpoint(), 15.0, tmp_path / "out", save_raw=True)
        n = len(dataset.split("test"))
        raws = list((tmp_path / "out").rglob("*_raw.png"))
        assert len(raws) == n
