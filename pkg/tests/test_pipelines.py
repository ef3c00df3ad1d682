import filecmp
import json
import struct

import numpy as np
import pytest
import torch
from scipy import ndimage

from genimg.estimators import CompressionModel, ControlNetTranslator, LatentDiffusion
from genimg.foundation import ConfigError, RangeError
from genimg.pipelines import (
    GUIDANCE_WEIGHTS,
    DatasetManifest,
    PrototypeAligner,
    ShapeWorldSpec,
    TrainingConfig,
    evaluate,
    generate_shapeworld,
    load_estimator,
    render_shapeworld,
    sweep_guidance,
    train,
)
from genimg.pipelines.cli import main
from genimg.pipelines.io import RAW_HEADER, read_array, read_raw, write_array, write_raw

TINY_AE = "channels = (8, 8)\nlatent_channels = 2\nnorm_groups = 4\n"
TINY_UNET = "channels = (8, 16)\nattention_levels = (False, True)\nhead_channels = (0, 8)\nnorm_groups = 4\n"


def test_shapeworld_is_reproducible():
    spec = ShapeWorldSpec(classes=("disc",), seed=11)
    a = render_shapeworld(spec, 4)
    b = render_shapeworld(spec, 4)
    assert torch.equal(a[0], b[0]) and a[3] == b[3]
    assert a[0].shape == (4, 1, 32, 32)
    assert not torch.equal(a[0][0], a[0][1])
    # items depend only on their own index
    assert torch.equal(render_shapeworld(spec, 2, start=2)[0], a[0][2:])


def test_discs_are_single_components():
    images, masks, labels, captions = render_shapeworld(ShapeWorldSpec(classes=("disc",)), 16)
    for img in images[:, 0].numpy():
        _, n = ndimage.label(img > 0.3)
        assert n == 1
    assert all(c.startswith(("a bright disc", "a dim disc")) for c in captions)


def test_three_dimensional_items(tmp_path):
    spec = ShapeWorldSpec(image_size=16, spatial_rank=3, classes=("ball", "cube"), seed=1)
    m = generate_shapeworld(spec, 3, tmp_path)
    images, _, paired, _ = m.load_split(None)
    assert images.shape == (3, 1, 16, 16, 16) and paired.shape == images.shape
    assert m.format == "nifti_3d"
    with pytest.raises(RangeError):
        ShapeWorldSpec(spatial_rank=3, classes=("disc",))


def test_file_format_round_trips(tmp_path):
    img = np.random.default_rng(0).random((9, 7)).astype(np.float32)
    write_array(tmp_path / "a.png", img, "png_2d")
    assert np.abs(read_array(tmp_path / "a.png", "png_2d") - img).max() <= 0.5 / 65535 + 1e-7
    vol = np.random.default_rng(1).random((4, 5, 6)).astype(np.float32)
    write_array(tmp_path / "v.nii", vol, "nifti_3d")
    assert np.array_equal(read_array(tmp_path / "v.nii", "nifti_3d"), vol)
    for arr in (vol, np.arange(12, dtype=np.int64).reshape(3, 4), np.array([1, 2], dtype=np.uint16)):
        write_raw(tmp_path / "r.gra", arr)
        back = read_raw(tmp_path / "r.gra")
        assert back.dtype == arr.dtype and np.array_equal(back, arr)
    head = (tmp_path / "r.gra").read_bytes()[:RAW_HEADER.size]
    magic, version, code, rank, *dims = RAW_HEADER.unpack(head)
    assert (magic, version, code, rank, dims[0]) == (b"GENIMGRA", 1, 2, 1, 2)
    assert struct.calcsize("<8sHBB4x6Q") == 64


def test_manifest_validation(tmp_path):
    m = generate_shapeworld(ShapeWorldSpec(seed=2), 8, tmp_path)
    assert {it.split for it in m.items} == {"train", "test"}
    loaded = DatasetManifest.load(tmp_path / "manifest.json")
    assert loaded.items == m.items
    loaded.items.append(loaded.items[0].__class__(loaded.items[0].image, split="test"
                        if loaded.items[0].split == "train" else "train"))
    with pytest.raises(ConfigError):
        loaded.validate()


def test_config_parsing_and_hash():
    text = "[model]\nkind = kl\nchannels = (8, 8)\n[run]\nsteps = 3\n"
    cfg = TrainingConfig.from_string(text)
    assert cfg.model["channels"] == (8, 8) and cfg.run.steps == 3
    assert cfg.optimizer_kind() == "adam"
    over = TrainingConfig.from_string(text, ["run.steps=5", "optimizer.lr=0.01"])
    assert over.run.steps == 5 and over.optimizer.lr == 0.01
    assert over.hash != cfg.hash and cfg.hash == TrainingConfig.from_string(text).hash
    assert TrainingConfig.from_string(cfg.to_ini()).hash == cfg.hash
    for bad in ("[model]\nkind = gan\n", "[run]\nsteps = many\n", "[loss]\nkl_weight = -1\n", "[extra]\na = 1\n",
                "[run]\nunknown = 1\n"):
        with pytest.raises(ConfigError):
            TrainingConfig.from_string(bad)
    assert TrainingConfig.from_string("[run]\nepochs = 2\nbatch_size = 3\n").num_steps(8) == 6


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    generate_shapeworld(ShapeWorldSpec(image_size=16, seed=3, test_fraction=0.5), 16, root)
    return DatasetManifest.load(root / "manifest.json")


def test_smoke_training_chain(tiny_data, tmp_path):
    run = f"[run]\nepochs = 1\nbatch_size = 8\noutput_dir = {tmp_path}\n"
    ae_cfg = TrainingConfig.from_string(f"[model]\nkind = kl\n{TINY_AE}{run}name = ae\n")
    ae_path = train(ae_cfg, manifest=tiny_data)
    ae, meta = load_estimator(ae_path)
    assert meta["config_hash"] == ae_cfg.hash and isinstance(ae, CompressionModel)
    assert (tmp_path / "ae_loss.csv").read_text().startswith("step,name,value")
    ld_cfg = TrainingConfig.from_string(f"[model]\nkind = diffusion\n{TINY_UNET}[schedule]\nT = 50\n{run}name = ld\n")
    ld_path = train(ld_cfg, str(ae_path), tiny_data)
    ld, _ = load_estimator(ld_path)
    assert ld.sample(2, seed=0, num_inference_steps=3).shape == (2, 1, 16, 16)
    cn_cfg = TrainingConfig.from_string(f"[model]\nkind = controlnet\nconditioning_embedding_channels = (4, 8)\n{run}"
                                        "name = cn\n")
    before = {k: v.clone() for k, v in ld.unet_.state_dict().items()}
    cn_path = train(cn_cfg, str(ld_path), tiny_data)
    cn, _ = load_estimator(cn_path)
    assert isinstance(cn, ControlNetTranslator)
    after = cn.diffusion.unet_.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    with pytest.raises(ConfigError):
        train(TrainingConfig.from_string(f"[model]\nkind = kl\nwidth = 3\n{run}"), manifest=tiny_data)


def test_diffusion_loss_decreases_on_zero_data():
    torch.manual_seed(0)
    model = LatentDiffusion(None, channels=(8, 16), attention_levels=(False, False), head_channels=(0, 0),
                            norm_groups=4, T=100, prediction_type="v_prediction", n_steps=200, batch_size=8,
                            lr=2e-3, seed=0)
    model.fit(torch.zeros(16, 1, 8, 8))
    losses = [v for _, name, v in model.loss_history_ if name == "diffusion"]
    assert len(losses) == 200
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])


class IdentityCompression(CompressionModel):
    def reconstruct(self, X):
        return torch.as_tensor(X, dtype=torch.float32)


def test_evaluate_identity_stub():
    x, _, _, _ = render_shapeworld(ShapeWorldSpec(), 4)
    reports = evaluate(IdentityCompression(), x, seed=5, config_hash="abc")
    by_name = {r.name: r for r in reports}
    assert by_name["recon_ms_ssim"].value == 1.0
    assert all(r.seed == 5 and r.config_hash == "abc" for r in reports)


def test_guidance_sweep_rows():
    x, _, labels, captions = render_shapeworld(ShapeWorldSpec(image_size=16), 12)
    model = LatentDiffusion(None, channels=(8, 16), attention_levels=(False, True), head_channels=(0, 8),
                            norm_groups=4, cross_attention_dim=8, T=20, n_steps=2, batch_size=4).fit(x, captions)
    aligner = PrototypeAligner(["disc", "square", "cross"]).fit(x, labels)
    rows = sweep_guidance(model, captions[:4], x, aligner, num_inference_steps=2, config_hash="h")
    assert [r["w"] for r in rows] == list(GUIDANCE_WEIGHTS) and len(rows) == 12
    assert all(np.isfinite(r["fid"]) and 0 <= r["alignment"] <= 100 for r in rows)


def test_cli_usage(capsys):
    assert main(["sample", "--help"]) == 0
    assert "usage" in capsys.readouterr().out
    assert main(["sample", "--bogus", "--out", "x"]) == 1
    assert "--bogus" in capsys.readouterr().err
    assert main(["no-such-command"]) == 1


def test_cli_make_data_is_deterministic(tmp_path):
    spec = tmp_path / "shapes.cfg"
    spec.write_text("[shapeworld]\nimage_size = 16\n")
    for name in ("a", "b"):
        assert main(["make-data", "--spec", str(spec), "--n", "12", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for sub in ("images", "masks"):
        assert not filecmp.dircmp(tmp_path / "a" / sub, tmp_path / "b" / sub).diff_files
    meta = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert meta["metadata"]["spec"]["seed"] == 7 and len(meta["items"]) == 12
    assert main(["make-data", "--spec", str(tmp_path / "missing.cfg"), "--n", "2", "--out", str(tmp_path / "c")]) == 2
