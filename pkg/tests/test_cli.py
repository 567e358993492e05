import numpy as np
import pytest

from cloudcorr import cli, evaluation, pointcloud, training
from cloudcorr.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE


SMOKE_CONFIG = """\
mode = unsupervised
epochs = 1
batch_size = 1
learning_rate = 0.001
seed = 3
layers = 2
feature_dim = 16
hidden = 16
knn = 4
k_mfd = 4
"""


@pytest.fixture
def dataset(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["synth", "--kind", "rigid", "--n", "24", "--pairs", "2",
                     "--seed", "1", "--out-dir", str(data)]) == EXIT_OK
    return data


def test_synth_creates_exact_pair_count(dataset):
    names = (dataset / "manifest.txt").read_text().split()
    assert names == ["pair_0000", "pair_0001"]
    for name in names:
        for fname in ("source.xyz", "target.xyz", "gt.csv"):
            assert (dataset / name / fname).exists()


def test_synth_same_seed_byte_identical(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        cli.main(["synth", "--pairs", "2", "--n", "20", "--seed", "9", "--out-dir", str(out)])
    for rel in ("manifest.txt", "pair_0001/source.xyz", "pair_0001/target.xyz", "pair_0001/gt.csv"):
        assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes()


def test_synth_gt_is_valid_bijection(dataset):
    gt = evaluation.read_corr_csv((dataset / "pair_0000" / "gt.csv").read_text())
    assert pointcloud.is_bijection(gt, len(gt))


def test_synth_nonrigid_kind(tmp_path):
    out = tmp_path / "nr"
    assert cli.main(["synth", "--kind", "nonrigid", "--pairs", "1", "--n", "20",
                     "--amplitude", "0.2", "--out-dir", str(out)]) == EXIT_OK
    pairs = cli.load_pairs(out)
    assert pairs[0].gt is not None


def test_train_smoke_and_determinism(dataset, tmp_path):
    cfg_path = tmp_path / "train.cfg"
    cfg_path.write_text(SMOKE_CONFIG)
    ck1, ck2 = tmp_path / "m1.ckpt", tmp_path / "m2.ckpt"
    for ck in (ck1, ck2):
        code = cli.main(["train", "--config", str(cfg_path), "--data", str(dataset),
                         "--out", str(ck)])
        assert code == EXIT_OK
    assert ck1.read_bytes() == ck2.read_bytes()
    log1 = (tmp_path / "m1.ckpt.loss.csv").read_text()
    log2 = (tmp_path / "m2.ckpt.loss.csv").read_text()
    assert log1 == log2
    assert log1.splitlines()[0] == "epoch,mean_loss"


def test_train_supervised_requires_gt(dataset, tmp_path):
    (dataset / "pair_0000" / "gt.csv").unlink()
    cfg_path = tmp_path / "train.cfg"
    cfg_path.write_text(SMOKE_CONFIG.replace("mode = unsupervised", "mode = supervised"))
    code = cli.main(["train", "--config", str(cfg_path), "--data", str(dataset),
                     "--out", str(tmp_path / "m.ckpt")])
    assert code == EXIT_DATA


def test_infer_and_eval_flow(dataset, tmp_path):
    cfg_path = tmp_path / "train.cfg"
    cfg_path.write_text(SMOKE_CONFIG)
    ckpt = tmp_path / "m.ckpt"
    assert cli.main(["train", "--config", str(cfg_path), "--data", str(dataset),
                     "--out", str(ckpt)]) == EXIT_OK
    pair_dir = dataset / "pair_0000"
    corr_path = tmp_path / "corr.csv"
    assert cli.main(["infer", "--checkpoint", str(ckpt), "--config", str(cfg_path),
                     "--source", str(pair_dir / "source.xyz"),
                     "--target", str(pair_dir / "target.xyz"),
                     "--out", str(corr_path)]) == EXIT_OK
    indices = evaluation.read_corr_csv(corr_path.read_text())
    assert indices.shape == (24,)
    assert indices.min() >= 0 and indices.max() < 24

    curve_path = tmp_path / "curve.csv"
    code = cli.main(["eval", "--pred", str(corr_path), "--gt", str(pair_dir / "gt.csv"),
                     "--target", str(pair_dir / "target.xyz"),
                     "--out", str(curve_path), "--validate"])
    assert code == EXIT_OK
    curve = evaluation.read_curve_csv(curve_path.read_text())
    fractions = [f for _, f in curve]
    assert fractions == sorted(fractions)


def test_eval_prints_percentage(dataset, tmp_path, capsys):
    pair_dir = dataset / "pair_0000"
    gt_path = pair_dir / "gt.csv"
    pred_path = tmp_path / "pred.csv"
    pred_path.write_text(gt_path.read_text())
    assert cli.main(["eval", "--pred", str(pred_path), "--gt", str(gt_path),
                     "--target", str(pair_dir / "target.xyz")]) == EXIT_OK
    assert "Corr: 100.00%" in capsys.readouterr().out


def test_eval_half_correct_fixture(tmp_path, capsys):
    cloud = pointcloud.PointCloud([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    target = tmp_path / "t.xyz"
    target.write_text(pointcloud.write_xyz(cloud))
    (tmp_path / "gt.csv").write_text(evaluation.write_corr_csv([0, 1, 2, 3]))
    (tmp_path / "pred.csv").write_text(evaluation.write_corr_csv([0, 1, 3, 2]))
    assert cli.main(["eval", "--pred", str(tmp_path / "pred.csv"),
                     "--gt", str(tmp_path / "gt.csv"), "--target", str(target)]) == EXIT_OK
    assert "Corr: 50.00%" in capsys.readouterr().out


def test_infer_size_mismatch_without_keypoints(dataset, tmp_path):
    cfg_path = tmp_path / "train.cfg"
    cfg_path.write_text(SMOKE_CONFIG)
    ckpt = tmp_path / "m.ckpt"
    cli.main(["train", "--config", str(cfg_path), "--data", str(dataset), "--out", str(ckpt)])
    small = pointcloud.PointCloud(np.random.default_rng(0).normal(size=(12, 3)))
    small_path = tmp_path / "small.xyz"
    small_path.write_text(pointcloud.write_xyz(small))
    code = cli.main(["infer", "--checkpoint", str(ckpt), "--config", str(cfg_path),
                     "--source", str(small_path),
                     "--target", str(dataset / "pair_0000" / "target.xyz"),
                     "--out", str(tmp_path / "c.csv")])
    assert code == EXIT_DATA


def test_infer_keypoints_produces_total_output(dataset, tmp_path):
    cfg_path = tmp_path / "train.cfg"
    cfg_path.write_text(SMOKE_CONFIG)
    ckpt = tmp_path / "m.ckpt"
    cli.main(["train", "--config", str(cfg_path), "--data", str(dataset), "--out", str(ckpt)])
    pair_dir = dataset / "pair_0000"
    out = tmp_path / "kp.csv"
    assert cli.main(["infer", "--checkpoint", str(ckpt), "--config", str(cfg_path),
                     "--source", str(pair_dir / "source.xyz"),
                     "--target", str(pair_dir / "target.xyz"),
                     "--keypoints", "8", "--out", str(out)]) == EXIT_OK
    indices = evaluation.read_corr_csv(out.read_text())
    assert indices.shape == (24,)


def test_bench_writes_csv(tmp_path):
    out = tmp_path / "bench.csv"
    assert cli.main(["bench", "--sizes", "4,8", "--iterations", "2",
                     "--repeats", "1", "--out", str(out)]) == EXIT_OK
    rows = out.read_text().splitlines()
    assert rows[0] == "method,n,median_seconds"
    assert len(rows) == 5


def test_usage_errors_exit_2():
    assert cli.main([]) == EXIT_USAGE
    assert cli.main(["synth"]) == EXIT_USAGE  # missing required flags
    assert cli.main(["--help"]) == EXIT_OK


def test_missing_files_exit_3(tmp_path):
    assert cli.main(["train", "--config", str(tmp_path / "none.cfg"),
                     "--data", str(tmp_path), "--out", str(tmp_path / "m.ckpt")]) == EXIT_DATA
    assert cli.main(["eval", "--pred", str(tmp_path / "nope.csv"),
                     "--gt", str(tmp_path / "nope.csv"),
                     "--target", str(tmp_path / "nope.xyz")]) == EXIT_DATA


def test_emitted_files_reparse_through_own_readers(dataset):
    pairs = cli.load_pairs(dataset)
    assert len(pairs) == 2
    assert pairs[0].n == 24
    assert pairs[0].gt is not None
