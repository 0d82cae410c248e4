import json

import numpy as np
import pytest

from voxdiff.cli import main
from voxdiff.config import ConfigError, load_config
from voxdiff.dataset import ToySceneConfig, generate_toy_scenes
from voxdiff.denoiser import OracleDenoiser, UNetConfig, build_unet, save_model
from voxdiff.export import palette, slice_counts
from voxdiff.grid import load_sgrid, save_sgrid
from voxdiff.pyramid import downsample

TINY = {
    "schedule": {"T": 4},
    "model": {"base_channels": 4, "depth": 1, "time_embed_dim": 8, "blocks_per_level": 1},
    "train": {"epochs": 1, "batch_size": 4},
}


def write_config(tmp_path, extra=None, name="run.json"):
    data = {**TINY, "paths": {"data": str(tmp_path / "toy"), "checkpoints": str(tmp_path / "ck")}}
    data.update(extra or {})
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture
def trained(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["make-toy", "--config", cfg, "--out", str(tmp_path / "toy"), "--count", "8"]) == 0
    assert main(["train", "--config", cfg, "--quiet"]) == 0
    return tmp_path, cfg


def test_sample_is_byte_identical_under_a_seed(trained):
    tmp, cfg = trained
    for name in ("a", "b"):
        assert main(["sample", "--config", cfg, "--seed", "7", "--threads", "1", "--out", str(tmp / f"{name}.sgrid")]) == 0
    assert (tmp / "a.sgrid").read_bytes() == (tmp / "b.sgrid").read_bytes()
    assert main(["sample", "--config", cfg, "--seed", "8", "--out", str(tmp / "c.sgrid")]) == 0
    assert load_sgrid(tmp / "c.sgrid").dims == (16, 16, 4)


def test_train_writes_checkpoints_and_curves(trained):
    tmp, _ = trained
    for level in (1, 2):
        assert (tmp / "ck" / f"scale{level}.vdck").exists()
        assert (tmp / "ck" / f"scale{level}.vdck.json").exists()
        assert (tmp / "ck" / f"scale{level}_loss.csv").read_text().startswith("epoch,mean_total")


def test_sample_intermediates_and_directory_output(trained):
    tmp, cfg = trained
    out = tmp / "many"
    assert main(["sample", "--config", cfg, "--seed", "3", "--count", "2", "--out", str(out), "--intermediates"]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["sample_00003.scale1.sgrid", "sample_00003.sgrid", "sample_00004.scale1.sgrid", "sample_00004.sgrid"]
    assert load_sgrid(out / "sample_00003.scale1.sgrid").dims == (8, 8, 2)


def test_finetune_from_keeps_frozen_scales(trained):
    tmp, cfg = trained
    ft = tmp / "ft"
    assert main(["train", "--config", cfg, "--quiet", "--finetune-from", str(tmp / "ck"),
                 "--scales", "1", "--checkpoints", str(ft)]) == 0
    assert (ft / "scale2.vdck").read_bytes() == (tmp / "ck" / "scale2.vdck").read_bytes()
    assert (ft / "scale1.vdck").read_bytes() != (tmp / "ck" / "scale1.vdck").read_bytes()


def _oracle_checkpoints(tmp_path, truth, cond_fine):
    ck = tmp_path / "oracle"
    ck.mkdir()
    save_model(OracleDenoiser(downsample(truth, (8, 8, 2))), ck / "scale1.vdck")
    save_model(OracleDenoiser(truth, cond_fine), ck / "scale2.vdck")
    return ck


@pytest.mark.parametrize("layout", [None, {"rows": 2, "cols": 2, "overlap_ratio": 0.25}])
def test_refine_with_oracles_reproduces_the_scene(tmp_path, layout):
    truth = generate_toy_scenes(ToySceneConfig(seed=11), 1)[0]
    ck = _oracle_checkpoints(tmp_path, truth, 6 if layout is None else 12)
    cfg = write_config(tmp_path, {"layout": layout})
    coarse = tmp_path / "s1.sgrid"
    save_sgrid(downsample(truth, (8, 8, 2)), coarse)
    out = tmp_path / "refined.sgrid"
    args = ["refine", "--config", cfg, "--coarse", str(coarse), "--checkpoints", str(ck), "--out", str(out), "--deterministic"]
    assert main(args) == 0
    assert load_sgrid(out) == truth
    assert main(["sample", "--config", cfg, "--checkpoints", str(ck), "--deterministic", "--out", str(tmp_path / "s.sgrid")]) == 0
    assert load_sgrid(tmp_path / "s.sgrid") == truth


def test_infinite_with_periodic_oracles(tmp_path):
    truth = generate_toy_scenes(ToySceneConfig(seed=5), 1)[0]
    ck = tmp_path / "inf"
    ck.mkdir()
    save_model(OracleDenoiser(downsample(truth, (8, 8, 2)), 6, periodic=True), ck / "scale1.vdck")
    save_model(OracleDenoiser(truth, 12, periodic=True), ck / "scale2.vdck")
    cfg = write_config(tmp_path)
    out = tmp_path / "big.sgrid"
    assert main(["infinite", "--config", cfg, "--checkpoints", str(ck), "--rows", "2", "--cols", "3",
                 "--deterministic", "--out", str(out)]) == 0
    g = load_sgrid(out)
    # strips are a quarter of a tile: 16 + 12 = 28 rows, 16 + 2 * 12 = 40 columns
    assert g.dims == (28, 40, 4)
    ix, iy = np.arange(28) % 16, np.arange(40) % 16
    np.testing.assert_array_equal(g.labels, truth.labels[np.ix_(ix, iy, np.arange(4))])


def test_eval_self_comparison(tmp_path, capsys):
    d = tmp_path / "dirA"
    d.mkdir()
    for i, g in enumerate(generate_toy_scenes(ToySceneConfig(seed=2), 6)):
        save_sgrid(g, d / f"s{i}.sgrid")
    csv_path = tmp_path / "report.csv"
    assert main(["eval", "--gen", str(d), "--ref", str(d), "--csv", str(csv_path)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["f3d"] == 0.0 and report["mmd2"] == 0.0
    assert report["ssim_percentiles"]["10"] == 1.0
    assert report["miou"] == 1.0 and report["ma"] == 1.0
    assert "ssim_percentiles.10,1.0" in csv_path.read_text()


def test_retrieve_table(tmp_path, capsys):
    corpus, gen = tmp_path / "corpus", tmp_path / "gen"
    corpus.mkdir()
    gen.mkdir()
    scenes = generate_toy_scenes(ToySceneConfig(seed=4), 5)
    for i, g in enumerate(scenes):
        save_sgrid(g, corpus / f"c{i}.sgrid")
    save_sgrid(scenes[3], gen / "q.sgrid")
    csv_path = tmp_path / "nn.csv"
    assert main(["retrieve", "--gen", str(gen), "--corpus", str(corpus), "--csv", str(csv_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "percentile,ssim" and out[1] == "10,1.000000"
    assert csv_path.read_text().splitlines()[1].startswith("q.sgrid,c3.sgrid,")


def test_export_vertex_count(tmp_path):
    g = generate_toy_scenes(ToySceneConfig(seed=9), 1)[0]
    src = tmp_path / "g.sgrid"
    save_sgrid(g, src)
    ply = tmp_path / "g.ply"
    assert main(["export", str(src), "--out", str(ply)]) == 0
    lines = ply.read_text().splitlines()
    header_end = lines.index("end_header")
    n = int(lines[2].split()[-1])
    assert n == int((g.labels != 0).sum()) == len(lines) - header_end - 1
    first = lines[header_end + 1].split()
    x, y, z = (int(v) for v in first[:3])
    label = int(first[-1])
    assert g.labels[x, y, z] == label and label != 0
    assert [int(v) for v in first[3:6]] == palette(6)[label].tolist()
    rows = (tmp_path / "g.slices.csv").read_text().splitlines()
    assert len(rows) == 1 + g.dims[2]
    assert [int(v) for v in rows[1].split(",")[1:]] == slice_counts(g)[0].tolist()


def test_palette_is_fixed():
    np.testing.assert_array_equal(palette(20), palette(20))
    assert palette(20)[:11].tolist() == palette(11).tolist()


def test_make_toy_and_preprocess(tmp_path):
    assert main(["make-toy", "--out", str(tmp_path / "t"), "--count", "3", "--seed", "1", "--shift", "vehicle=2"]) == 0
    assert len(list((tmp_path / "t").glob("*.sgrid"))) == 3
    raw = np.array([40, 50, 11, 252, 40, 40, 50, 0], dtype="<u2")
    (tmp_path / "raw").mkdir()
    (tmp_path / "raw" / "000.label").write_bytes(raw.tobytes())
    assert main(["preprocess", str(tmp_path / "raw"), "--out", str(tmp_path / "pre"), "--dims", "2", "2", "2",
                 "--dtype", "u2", "--remap", "kitti-to-carla", "--keep-layers", "1"]) == 0
    g = load_sgrid(tmp_path / "pre" / "000.sgrid")
    assert g.dims == (2, 2, 1) and g.num_classes == 11
    assert g.labels.ravel(order="F").tolist() == [6, 1, 0, 0]


def test_exit_code_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schedule": ')
    assert main(["sample", "--config", str(bad), "--out", str(tmp_path / "x.sgrid")]) == 2
    assert str(bad) in capsys.readouterr().err
    cfg = write_config(tmp_path, {"pyramid": {"scales": [[8, 8, 2], [12, 12, 4]]}})
    assert main(["sample", "--config", cfg, "--out", str(tmp_path / "x.sgrid")]) == 2
    assert cfg in capsys.readouterr().err
    assert main(["sample", "--config", str(tmp_path / "absent.json"), "--out", "x.sgrid"]) == 2


def test_exit_code_missing_artifact(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["sample", "--config", cfg, "--out", str(tmp_path / "x.sgrid")]) == 3
    assert "scale1.vdck" in capsys.readouterr().err
    assert main(["export", str(tmp_path / "none.sgrid"), "--out", str(tmp_path / "x.ply")]) == 3
    (tmp_path / "junk.sgrid").write_bytes(b"not a grid")
    assert main(["export", str(tmp_path / "junk.sgrid"), "--out", str(tmp_path / "x.ply")]) == 3


def test_exit_code_numerical_failure(tmp_path, capsys):
    ck = tmp_path / "ck"
    ck.mkdir()
    cfg_model = UNetConfig(**TINY["model"])
    m1 = build_unet(cfg_model, 6, False)
    m2 = build_unet(cfg_model, 6, True)
    m1.params["out.w"].data[...] = np.nan
    save_model(m1, ck / "scale1.vdck")
    save_model(m2, ck / "scale2.vdck")
    cfg = write_config(tmp_path)
    assert main(["sample", "--config", cfg, "--out", str(tmp_path / "x.sgrid")]) == 4
    assert "non-finite" in capsys.readouterr().err


def test_flag_overrides_win(tmp_path):
    cfg = write_config(tmp_path)
    run = load_config(cfg, ["train.epochs=3", "seed=9", "pyramid.saf_mode=nearest"])
    assert run.train.epochs == 3 and run.seed == 9 and run.pyramid.saf_mode == "nearest"
    assert run.train.seed == 9
    with pytest.raises(ConfigError):
        load_config(cfg, ["train.bogus=1"])
    with pytest.raises(ConfigError):
        load_config(cfg, ["train.T=7"])  # disagrees with schedule.T
    with pytest.raises(ConfigError):
        load_config(cfg, ["layout={\"rows\": 2, \"cols\": 2, \"overlap_ratio\": 0.1}", "model.depth=2"])


def test_condition_widths():
    run = load_config(None, ["layout={\"rows\": 2, \"cols\": 2, \"overlap_ratio\": 0.25}"])
    assert [run.condition_channels(lv) for lv in (1, 2)] == [0, 12]
    assert [run.condition_channels(lv, infinite=True) for lv in (1, 2)] == [6, 12]
    plain = load_config()
    assert [plain.condition_channels(lv) for lv in (1, 2)] == [0, 6]


def test_infinite_training_mode(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["make-toy", "--config", cfg, "--out", str(tmp_path / "toy"), "--count", "4"]) == 0
    assert main(["train", "--config", cfg, "--mode", "infinite", "--quiet"]) == 0
    assert main(["infinite", "--config", cfg, "--rows", "2", "--cols", "2", "--seed", "1",
                 "--out", str(tmp_path / "inf.sgrid"), "--intermediates"]) == 0
    assert load_sgrid(tmp_path / "inf.sgrid").dims == (28, 28, 4)
    assert load_sgrid(tmp_path / "inf.scale1.sgrid").dims == (14, 14, 2)


def test_threads_env_fallback(trained, monkeypatch):
    tmp, cfg = trained
    monkeypatch.setenv("VOXDIFF_THREADS", "1")
    assert main(["sample", "--config", cfg, "--seed", "7", "--out", str(tmp / "e.sgrid")]) == 0
    assert main(["sample", "--config", cfg, "--seed", "7", "--threads", "1", "--out", str(tmp / "f.sgrid")]) == 0
    assert (tmp / "e.sgrid").read_bytes() == (tmp / "f.sgrid").read_bytes()
    monkeypatch.setenv("VOXDIFF_THREADS", "0")
    assert main(["sample", "--config", cfg, "--out", str(tmp / "g.sgrid")]) == 2

