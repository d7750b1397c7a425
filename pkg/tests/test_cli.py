import json

import numpy as np
import pytest

from csfold.autodiff import Tensor
from csfold.checkpoint import load_checkpoint, save_checkpoint
from csfold.cli import main
from csfold.config import RunConfig, build_model
from csfold.errors import ConfigurationError, ImageIOError
from csfold.imageio import crop_to_extents, load_image, pad_to_block, save_image
from csfold.training import AdamState, adam_step
from conftest import make_smooth_images


def write_pgm(path, array):
    pixels = np.clip(np.rint(np.asarray(array) * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode()
    path.write_bytes(header + pixels.tobytes())


class TestLoadImage:
    def test_black_pgm(self, tmp_path):
        path = tmp_path / "black.pgm"
        write_pgm(path, np.zeros((6, 8)))
        img = load_image(path)
        assert img.shape == (1, 6, 8)
        np.testing.assert_array_equal(img.data, np.zeros((1, 6, 8), dtype=np.float32))

    def test_white_pgm(self, tmp_path):
        path = tmp_path / "white.pgm"
        write_pgm(path, np.ones((4, 4)))
        np.testing.assert_array_equal(load_image(path).data, np.ones((1, 4, 4), dtype=np.float32))

    def test_pgm_header_comments(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 2\n255\n" + bytes([0, 128, 255, 64]))
        img = load_image(path)
        assert img.data[0, 0, 1] == pytest.approx(128 / 255)

    def test_red_png_uses_luminance_weights(self, tmp_path):
        from PIL import Image

        path = tmp_path / "red.png"
        rgb = np.zeros((5, 5, 3), dtype=np.uint8)
        rgb[..., 0] = 255
        Image.fromarray(rgb, mode="RGB").save(path)
        img = load_image(path)
        np.testing.assert_allclose(img.data, np.full((1, 5, 5), 0.299, dtype=np.float32), atol=1e-6)

    def test_grayscale_png_roundtrip(self, tmp_path, rng):
        path = tmp_path / "g.png"
        original = rng.uniform(size=(12, 9))
        save_image(path, original)
        back = load_image(path)
        np.testing.assert_allclose(back.data[0], original, atol=1.0 / 255)

    def test_pgm_roundtrip(self, tmp_path, rng):
        path = tmp_path / "g.pgm"
        original = rng.uniform(size=(7, 11))
        save_image(path, original)
        np.testing.assert_allclose(load_image(path).data[0], original, atol=1.0 / 255)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImageIOError, match="no such file"):
            load_image(tmp_path / "absent.pgm")

    def test_corrupt_pgm_names_file(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P5\n4 4\n255\n\x00\x01")  # truncated pixels
        with pytest.raises(ImageIOError, match="bad.pgm"):
            load_image(path)

    def test_corrupt_png(self, tmp_path):
        path = tmp_path / "bad.png"
        path.write_bytes(b"\x89PNG\r\n\x1a\nnot really")
        with pytest.raises(ImageIOError, match="bad.png"):
            load_image(path)


class TestPadToBlock:
    def test_divisible_image_unchanged(self, rng):
        img = Tensor(rng.uniform(size=(1, 64, 64)))
        padded, extents = pad_to_block(img, 32)
        assert extents == (64, 64)
        np.testing.assert_array_equal(padded.data, img.data)

    def test_pads_to_next_multiple_and_crops_back(self, rng):
        img = Tensor(rng.uniform(size=(1, 65, 64)))
        padded, extents = pad_to_block(img, 32)
        assert padded.shape == (1, 96, 64)
        assert extents == (65, 64)
        restored = crop_to_extents(padded, extents)
        np.testing.assert_array_equal(restored.data, img.data)

    def test_border_mirrors_interior(self, rng):
        img = Tensor(rng.uniform(size=(1, 6, 6)).astype(np.float32))
        padded, _ = pad_to_block(img, 4)
        assert padded.shape == (1, 8, 8)
        # reflect about the last row/column, edge excluded
        np.testing.assert_array_equal(padded.data[0, 6, :6], img.data[0, 4, :])
        np.testing.assert_array_equal(padded.data[0, 7, :6], img.data[0, 3, :])
        np.testing.assert_array_equal(padded.data[0, :6, 6], img.data[0, :, 4])


class TestCheckpoint:
    def test_roundtrip_is_bit_exact(self, tmp_path):
        cfg = RunConfig(block_size=8, ratio=0.25, channels=4, iterations=2, patch_size=16, seed=7)
        model = build_model(cfg)
        params = model.named_parameters()
        state = AdamState(params)
        gen = np.random.default_rng(0)
        for _ in range(2):  # non-trivial moments
            for _, p in params:
                p.grad = gen.normal(size=p.shape).astype(p.dtype)
            adam_step(state, params, 1e-3)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, config=cfg, optimizer=state)

        loaded_model, loaded_cfg, loaded_state = load_checkpoint(path)
        assert loaded_cfg == cfg
        for (name, p), (name2, q) in zip(params, loaded_model.named_parameters()):
            assert name == name2
            np.testing.assert_array_equal(p.data, q.data)
            np.testing.assert_array_equal(state.m[name], loaded_state.m[name])
            np.testing.assert_array_equal(state.v[name], loaded_state.v[name])
        assert loaded_state.step_count == state.step_count

    def test_save_load_save_is_byte_identical(self, tmp_path):
        cfg = RunConfig(block_size=8, ratio=0.2, channels=4, iterations=1, patch_size=16)
        model = build_model(cfg)
        a = tmp_path / "a.ckpt"
        b = tmp_path / "b.ckpt"
        save_checkpoint(a, model, config=cfg)
        loaded, loaded_cfg, _ = load_checkpoint(a)
        save_checkpoint(b, loaded, config=loaded_cfg)
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"definitely not a checkpoint")
        with pytest.raises(ImageIOError):
            load_checkpoint(path)


class TestRunConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigurationError, match="mystery"):
            RunConfig.from_dict({"mystery": 1})

    def test_violations_name_the_field(self):
        with pytest.raises(ConfigurationError, match="ratio"):
            RunConfig.from_dict({"ratio": 1.5})
        with pytest.raises(ConfigurationError, match="channels"):
            RunConfig.from_dict({"channels": 1})
        with pytest.raises(ConfigurationError, match="patch_size"):
            RunConfig.from_dict({"patch_size": 50})
        with pytest.raises(ConfigurationError, match="warmup_epochs"):
            RunConfig.from_dict({"warmup_epochs": 99, "epochs": 5})

    def test_type_errors_name_the_field(self):
        with pytest.raises(ConfigurationError, match="iterations"):
            RunConfig.from_dict({"iterations": 2.5})

    def test_json_roundtrip(self, tmp_path):
        cfg = RunConfig(ratio=0.3, channels=8)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert RunConfig.from_json(path) == cfg


def surgery_identity_model():
    """Full-rate identity sampling plus pass-through stage weights: the
    reconstruction reproduces the input bit for bit."""
    cfg = RunConfig(block_size=8, ratio=1.0, channels=4, iterations=1, patch_size=16, seed=0)
    model = build_model(cfg)
    model.sampler.phi.data[...] = np.eye(64, dtype=np.float32)
    model.conv0.weight.data[...] = 0.0
    model.conv0.bias.data[...] = 0.0
    model.conv0.weight.data[0, 0, 1, 1] = 1.0  # channel 0 passes the image through
    stage = model.iterations[0]
    stage.projection.rho.data[...] = 0.0
    stage.projection.conv_o.weight.data[...] = 0.0
    stage.projection.conv_o.bias.data[...] = 0.0
    stage.projection.conv_o.weight.data[0, model.channels - 1, 0, 0] = 1.0  # stepped image out
    stage.ffn.ffb2.project.weight.data[...] = 0.0
    stage.ffn.ffb2.project.bias.data[...] = 0.0
    return cfg, model


class TestMain:
    def test_count_defaults_print_budget(self, capsys):
        assert main(["count"]) == 0
        out = capsys.readouterr().out
        total = [line for line in out.strip().splitlines() if line.startswith("total,")][0]
        params = int(total.split(",")[1])
        assert 0.38e6 <= params <= 0.42e6

    def test_count_rejects_bad_hw(self, capsys):
        assert main(["count", "--hw", "abc"]) == 1

    def test_reconstruct_identity_model_prints_infinite_psnr(self, tmp_path, capsys):
        cfg, model = surgery_identity_model()
        ckpt = tmp_path / "id.ckpt"
        save_checkpoint(ckpt, model, config=cfg)
        src = tmp_path / "in.pgm"
        write_pgm(src, make_smooth_images(1, 16, seed=5)[0])
        out_img = tmp_path / "out.pgm"
        code = main(["reconstruct", "--ckpt", str(ckpt), "--input", str(src), "--output", str(out_img)])
        assert code == 0
        assert "PSNR: inf dB" in capsys.readouterr().out
        assert load_image(out_img).shape == load_image(src).shape

    def test_reconstruct_restores_original_extents(self, tmp_path, capsys):
        cfg, model = surgery_identity_model()
        ckpt = tmp_path / "id.ckpt"
        save_checkpoint(ckpt, model, config=cfg)
        src = tmp_path / "odd.pgm"
        write_pgm(src, make_smooth_images(1, 32, seed=6)[0][:21, :13])
        out_img = tmp_path / "odd_out.pgm"
        assert main(["reconstruct", "--ckpt", str(ckpt), "--input", str(src), "--output", str(out_img)]) == 0
        assert load_image(out_img).shape == (1, 21, 13)

    def test_missing_checkpoint_is_io_error(self, tmp_path, capsys):
        code = main([
            "reconstruct", "--ckpt", str(tmp_path / "nope.ckpt"),
            "--input", str(tmp_path / "nope.pgm"), "--output", str(tmp_path / "o.pgm"),
        ])
        assert code == 2

    def test_bad_config_is_validation_error(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text('{"ratio": 2.0}')
        assert main(["count", "--config", str(cfg_path)]) == 1

    def test_train_eval_noise_sweep_pipeline(self, tmp_path, capsys):
        data = tmp_path / "data"
        data.mkdir()
        for i, img in enumerate(make_smooth_images(2, 48, seed=40)):
            write_pgm(data / f"img{i}.pgm", img)
        cfg = {
            "block_size": 16, "ratio": 0.3, "channels": 4, "iterations": 2,
            "epochs": 2, "warmup_epochs": 1, "batch_size": 4, "patch_size": 16,
            "patches_per_epoch": 8, "seed": 1,
        }
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "run"

        assert main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(out)]) == 0
        assert (out / "metrics.csv").exists()
        ckpt = out / "ckpt_epoch_001.ckpt"
        assert ckpt.exists()
        metrics = (out / "metrics.csv").read_text().splitlines()
        assert metrics[0] == "epoch,step,lr,loss,train_psnr"
        assert len(metrics) == 1 + 4  # 2 epochs x 2 batches

        capsys.readouterr()
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(data)]) == 0
        eval_out = capsys.readouterr().out.strip().splitlines()
        assert eval_out[0] == "name,psnr_db,ssim"
        assert eval_out[-1].startswith("mean,")

        sweep_csv = tmp_path / "sweep.csv"
        assert main([
            "noise-sweep", "--ckpt", str(ckpt), "--data", str(data),
            "--sigmas", "0,0.05", "--out", str(sweep_csv),
        ]) == 0
        lines = sweep_csv.read_text().strip().splitlines()
        assert lines[0] == "sigma,psnr_db,ssim"
        assert len(lines) == 3

    def test_gradcheck_single_seed(self, capsys):
        assert main(["gradcheck", "--seeds", "1"]) == 0
        assert "all gradient checks passed" in capsys.readouterr().out

    def test_gradcheck_f64_single_seed(self, capsys):
        assert main(["gradcheck", "--f64", "--seeds", "1"]) == 0
        out = capsys.readouterr().out
        assert "float64" in out
        assert "all gradient checks passed" in out

    def test_data_dir_without_images_is_io_error(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text("{}")
        assert main(["train", "--config", str(cfg_path), "--data", str(empty), "--out", str(tmp_path / "o")]) == 2
