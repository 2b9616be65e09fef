import json
import struct
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn

from camx_export import UnsupportedLayerError, build_module, export, export_module, layer_entries
from camx_export.export import reference_logits, save_png

FIXTURE_ROOT = Path(__file__).resolve().parents[2] / "tests" / "fixtures"


def toy_linear_model():
    model = nn.Sequential(nn.Flatten(), nn.Linear(3, 2))
    with torch.no_grad():
        model[1].weight.copy_(torch.tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        model[1].bias.copy_(torch.tensor([0.5, -0.5]))
    return model


class TestLayerEntries:
    def test_toy_blob_matches_hand_packed_floats(self, tmp_path):
        result = export_module(toy_linear_model(), tmp_path, input_shape=(3,),
                               mean=(0.0,), std=(1.0,))
        blob = result.blob_path.read_bytes()
        assert blob == struct.pack("<8f", 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.5, -0.5)
        manifest = json.loads(result.manifest_path.read_text())
        assert [e["kind"] for e in manifest["layers"]] == ["flatten", "dense"]
        assert manifest["layers"][1]["offset"] == 0
        assert manifest["layers"][1]["count"] == 8

    def test_unsupported_layer_rejected_by_name(self):
        model = nn.Sequential(nn.Flatten(), nn.Sigmoid(), nn.Linear(3, 2))
        with pytest.raises(UnsupportedLayerError, match="Sigmoid"):
            layer_entries(model)

    def test_grouped_conv_rejected(self):
        model = nn.Sequential(nn.Conv2d(4, 4, 3, groups=2))
        with pytest.raises(UnsupportedLayerError, match="grouped"):
            layer_entries(model)

    def test_asymmetric_stride_rejected(self):
        model = nn.Sequential(nn.Conv2d(1, 1, 3, stride=(1, 2)))
        with pytest.raises(UnsupportedLayerError, match="stride"):
            layer_entries(model)

    def test_non_global_adaptive_pool_rejected(self):
        model = nn.Sequential(nn.AdaptiveAvgPool2d(2))
        with pytest.raises(UnsupportedLayerError, match="global"):
            layer_entries(model)

    def test_ceil_mode_pool_rejected(self):
        model = nn.Sequential(nn.MaxPool2d(2, ceil_mode=True))
        with pytest.raises(UnsupportedLayerError, match="ceil_mode"):
            layer_entries(model)

    def test_missing_bias_exported_as_zeros(self):
        model = nn.Sequential(nn.Flatten(), nn.Linear(3, 2, bias=False))
        entries, chunks = layer_entries(model)
        assert entries[1]["count"] == 8
        bias = np.frombuffer(chunks[1], dtype="<f4")
        np.testing.assert_array_equal(bias, np.zeros(2, dtype=np.float32))

    def test_nested_sequential_flattened(self):
        model = nn.Sequential(
            nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.ReLU()),
            nn.Flatten(),
            nn.Linear(4 * 8 * 8, 2),
        )
        entries, _ = layer_entries(model)
        assert [e["kind"] for e in entries] == ["conv2d", "relu", "flatten", "dense"]
        assert [e["name"] for e in entries] == ["conv0", "relu0", "flat0", "fc0"]


def small_random_model(seed=3):
    torch.manual_seed(seed)
    return nn.Sequential(
        nn.Conv2d(3, 6, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2, stride=2),
        nn.Conv2d(6, 8, 3, padding=1),
        nn.ReLU(),
        nn.Flatten(),
        nn.Linear(8 * 5 * 5, 4),
    )


class TestExportModule:
    def test_reexport_is_byte_identical(self, tmp_path):
        model = small_random_model()
        rng = np.random.default_rng(4)
        images = rng.integers(0, 256, size=(5, 10, 10, 3), dtype=np.uint8)
        kwargs = dict(input_shape=(3, 10, 10), mean=(0.5, 0.5, 0.5),
                      std=(0.25, 0.25, 0.25), labels=("a", "b", "c", "d"),
                      fixture_images=images)
        first = export_module(model, tmp_path / "one", **kwargs)
        second = export_module(model, tmp_path / "two", **kwargs)
        for a, b in [(first.manifest_path, second.manifest_path),
                     (first.blob_path, second.blob_path),
                     (first.fixtures_path, second.fixtures_path)]:
            assert a.read_bytes() == b.read_bytes()
        for a, b in zip(first.fixture_image_paths, second.fixture_image_paths):
            assert a.read_bytes() == b.read_bytes()

    def test_logits_recorded_to_six_decimals(self, tmp_path):
        model = small_random_model()
        rng = np.random.default_rng(5)
        images = rng.integers(0, 256, size=(6, 10, 10, 3), dtype=np.uint8)
        result = export_module(model, tmp_path, input_shape=(3, 10, 10),
                               mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25),
                               fixture_images=images)
        payload = json.loads(result.fixtures_path.read_text())
        assert len(payload["fixtures"]) == 6
        for fixture in payload["fixtures"]:
            assert len(fixture["logits"]) == 4
            for value in fixture["logits"]:
                assert value == round(value, 6)

    def test_oracle_logits_do_not_mutate_model(self, tmp_path):
        model = small_random_model()
        rng = np.random.default_rng(6)
        images = rng.integers(0, 256, size=(5, 10, 10, 3), dtype=np.uint8)
        export_module(model, tmp_path, input_shape=(3, 10, 10),
                      mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25),
                      fixture_images=images)
        assert model[0].weight.dtype == torch.float32

    def test_engine_forward_matches_framework_logits(self, tmp_path):
        from camx import forward, load_model
        from camx.modelio import load_image

        model = small_random_model()
        rng = np.random.default_rng(7)
        images = rng.integers(0, 256, size=(5, 10, 10, 3), dtype=np.uint8)
        result = export_module(model, tmp_path, input_shape=(3, 10, 10),
                               mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25),
                               fixture_images=images)
        net = load_model(result.manifest_path)
        payload = json.loads(result.fixtures_path.read_text())
        for fixture in payload["fixtures"]:
            _, normalized = load_image(tmp_path / fixture["image"], net)
            scores = forward(net, normalized).scores.array
            np.testing.assert_allclose(scores, fixture["logits"], atol=1e-4)

    def test_engine_saver_reproduces_exported_bytes(self, tmp_path):
        from camx import load_model, save_model

        model = small_random_model()
        result = export_module(model, tmp_path / "exported", input_shape=(3, 10, 10),
                               mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25),
                               labels=("a", "b", "c", "d"))
        net = load_model(result.manifest_path)
        save_model(net, tmp_path / "resaved.json")
        assert (tmp_path / "resaved.json").read_bytes() == result.manifest_path.read_bytes()
        assert (tmp_path / "resaved.bin").read_bytes() == result.blob_path.read_bytes()


class TestCheckpointBundles:
    def test_export_round_trips_a_bundle(self, tmp_path):
        model = small_random_model()
        rng = np.random.default_rng(8)
        bundle = {
            "format": "camx-export-bundle",
            "layout": (
                ("conv2d", {"in": 3, "out": 6, "kernel": 3, "stride": 1, "padding": 1}),
                ("relu", {}),
                ("maxpool", {"kernel": 2, "stride": 2}),
                ("conv2d", {"in": 6, "out": 8, "kernel": 3, "stride": 1, "padding": 1}),
                ("relu", {}),
                ("flatten", {}),
                ("dense", {"in": 8 * 5 * 5, "out": 4}),
            ),
            "state": model.state_dict(),
            "input_shape": [3, 10, 10],
            "mean": [0.5, 0.5, 0.5],
            "std": [0.25, 0.25, 0.25],
            "labels": ["a", "b", "c", "d"],
            "fixture_images": rng.integers(0, 256, size=(5, 10, 10, 3), dtype=np.uint8),
        }
        torch.save(bundle, tmp_path / "checkpoint.pt")
        result = export(tmp_path / "checkpoint.pt", tmp_path / "out")
        direct = export_module(model, tmp_path / "direct", input_shape=(3, 10, 10),
                               mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25),
                               labels=("a", "b", "c", "d"),
                               fixture_images=bundle["fixture_images"])
        assert result.manifest_path.read_bytes() == direct.manifest_path.read_bytes()
        assert result.blob_path.read_bytes() == direct.blob_path.read_bytes()
        assert result.fixtures_path.read_bytes() == direct.fixtures_path.read_bytes()

    def test_foreign_file_rejected(self, tmp_path):
        torch.save({"weights": [1, 2, 3]}, tmp_path / "other.pt")
        with pytest.raises(ValueError, match="bundle"):
            export(tmp_path / "other.pt", tmp_path / "out")

    def test_build_module_matches_layout(self):
        model = build_module((("conv2d", {"in": 1, "out": 2, "kernel": 3}),
                              ("relu", {}), ("avgpool_global", {}),
                              ("flatten", {}), ("dense", {"in": 2, "out": 2})))
        kinds = [type(m).__name__ for m in model]
        assert kinds == ["Conv2d", "ReLU", "AdaptiveAvgPool2d", "Flatten", "Linear"]


class TestPngWriter:
    def test_round_trips_through_pillow(self, tmp_path):
        from PIL import Image

        rng = np.random.default_rng(9)
        pixels = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
        save_png(tmp_path / "x.png", pixels)
        with Image.open(tmp_path / "x.png") as img:
            np.testing.assert_array_equal(np.asarray(img), pixels)


class TestReferenceLogits:
    def test_matches_manual_normalization(self):
        model = toy_linear_model().double()
        image = np.full((1, 1, 3), 255, dtype=np.uint8)
        logits = reference_logits(model, image, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25))
        x = (1.0 - 0.5) / 0.25
        np.testing.assert_allclose(logits, [x * 6.0 + 0.5, x * 15.0 - 0.5], rtol=1e-12)


@pytest.mark.skipif(not (FIXTURE_ROOT / "model.json").exists(),
                    reason="trained fixture files not present")
class TestTrainedFixture:
    def test_engine_logits_match_recorded_fixtures(self):
        from camx import forward, load_model
        from camx.modelio import load_image

        net = load_model(FIXTURE_ROOT / "model.json")
        payload = json.loads((FIXTURE_ROOT / "fixtures.json").read_text())
        assert len(payload["fixtures"]) >= 5
        for fixture in payload["fixtures"]:
            _, normalized = load_image(FIXTURE_ROOT / fixture["image"], net)
            scores = forward(net, normalized).scores.array
            np.testing.assert_allclose(scores, fixture["logits"], atol=1e-4)
