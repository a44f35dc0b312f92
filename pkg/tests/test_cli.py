"""End-to-end command-line tests: every subcommand, exit codes,
determinism under fixed seeds."""

import filecmp

import pytest
import yaml

from texwarp.cli import main


def run(argv, capsys=None):
    code = main(argv)
    if capsys is not None:
        captured = capsys.readouterr()
        return code, captured.out, captured.err
    return code


def write_config(path, **kwargs):
    path.write_text(yaml.safe_dump(kwargs))
    return str(path)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    cfg = write_config(
        root / "synth.yaml",
        image_size=16,
        n_identities=4,
        n_images=24,
        attributes=["glasses", "smile"],
        seed=0,
        test_fraction=0.25,
        output_dir="data",
    )
    assert main(["synth-data", "--config", cfg]) == 0
    return root / "data"


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = write_config(
        out / "train.yaml",
        dae_epochs=1,
        epochs_constant=1,
        epochs_decay=0,
        batch_size=6,
        n_critic=2,
        flip_prob=0.0,
        seed=0,
    )
    code = main([
        "train",
        "--config", cfg,
        "--manifest", str(dataset / "manifest.csv"),
        "--stages", "dae,gan,joint",
        "--output-dir", str(out),
    ])
    assert code == 0
    assert (out / "checkpoint.twck").exists()
    assert (out / "losses.csv").exists()
    return out


class TestSynthData:
    def test_writes_images_and_manifest(self, dataset):
        assert (dataset / "manifest.csv").exists()
        assert (dataset / "ground_truth.npz").exists()
        assert len(list(dataset.glob("*.png"))) == 24

    def test_rerun_same_seed_identical(self, dataset, tmp_path):
        cfg = write_config(
            tmp_path / "synth.yaml",
            image_size=16,
            n_identities=4,
            n_images=24,
            attributes=["glasses", "smile"],
            seed=0,
            test_fraction=0.25,
            output_dir="data",
        )
        assert main(["synth-data", "--config", cfg]) == 0
        other = tmp_path / "data"
        for name in ["manifest.csv"] + sorted(p.name for p in other.glob("*.png")):
            assert filecmp.cmp(dataset / name, other / name, shallow=False), name

    def test_zero_images_is_usage_error(self, tmp_path, capsys):
        code, _, err = run(
            ["synth-data", "--n-images", "0", "--output-dir", str(tmp_path)],
            capsys,
        )
        assert code == 2
        assert "empty spec" in err

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.yaml", n_imges=5)
        code, _, err = run(["synth-data", "--config", cfg], capsys)
        assert code == 2
        assert "n_imges" in err


class TestTrain:
    def test_dae_only_leaves_gan_untrained(self, dataset, tmp_path):
        from texwarp import train as train_mod

        cfg = write_config(
            tmp_path / "t.yaml", dae_epochs=1, batch_size=6, seed=0
        )
        code = main([
            "train",
            "--config", cfg,
            "--manifest", str(dataset / "manifest.csv"),
            "--stages", "dae",
            "--output-dir", str(tmp_path),
        ])
        assert code == 0
        state = train_mod.load_checkpoint(tmp_path / "checkpoint.twck")
        log = train_mod.LossLog.load_csv(tmp_path / "losses.csv")
        assert len(log.values("dae/total")) > 0
        assert len(log.values("gan/g_total")) == 0
        assert state.progress["stage_index"] == 1

    def test_unknown_stage_is_usage_error(self, dataset, tmp_path, capsys):
        code, _, err = run([
            "train",
            "--manifest", str(dataset / "manifest.csv"),
            "--stages", "warmup",
            "--output-dir", str(tmp_path),
        ], capsys)
        assert code == 2
        assert "warmup" in err

    def test_missing_manifest_path(self, tmp_path, capsys):
        code, _, err = run(["train", "--output-dir", str(tmp_path)], capsys)
        assert code == 2

    def test_ablation_flags(self, dataset, tmp_path):
        from texwarp import train as train_mod

        cfg = write_config(
            tmp_path / "t.yaml",
            epochs_constant=1,
            epochs_decay=0,
            batch_size=6,
            n_critic=2,
            seed=0,
        )
        code = main([
            "train",
            "--config", cfg,
            "--manifest", str(dataset / "manifest.csv"),
            "--stages", "dae,gan,joint",
            "--no-dae",
            "--no-identity-loss",
            "--output-dir", str(tmp_path),
        ])
        assert code == 0
        state = train_mod.load_checkpoint(tmp_path / "checkpoint.twck")
        assert state.model.use_dae is False
        assert all(c.weights.lam_ip == 0.0 for c in state.plan)
        log = train_mod.LossLog.load_csv(tmp_path / "losses.csv")
        assert len(log.values("gan/cls_fake")) > 0
        assert (log.values("gan/identity") == 0.0).all()


class TestEdit:
    def test_single_target_writes_png(self, dataset, checkpoint, tmp_path, capsys):
        image = str(sorted(dataset.glob("*.png"))[0])
        code, out, _ = run([
            "edit",
            str(checkpoint / "checkpoint.twck"),
            image,
            "--target", "smile=1,glasses=0",
            "--output-dir", str(tmp_path),
        ], capsys)
        assert code == 0
        pngs = list(tmp_path.glob("edited_*.png"))
        assert len(pngs) == 1

    def test_grid_sheet_has_all_columns(self, dataset, checkpoint, tmp_path):
        from PIL import Image

        image = str(sorted(dataset.glob("*.png"))[0])
        code = main([
            "edit",
            str(checkpoint / "checkpoint.twck"),
            image,
            "--grid",
            "--output-dir", str(tmp_path),
        ])
        assert code == 0
        sheet = Image.open(tmp_path / "edit_grid.png")
        # input, texture, then a texture and image column per attribute
        assert sheet.size == (16 * (2 + 2 * 2), 16)

    def test_malformed_expression(self, dataset, checkpoint, tmp_path, capsys):
        image = str(sorted(dataset.glob("*.png"))[0])
        base = ["edit", str(checkpoint / "checkpoint.twck"), image,
                "--output-dir", str(tmp_path)]
        assert run(base + ["--target", "smile"], capsys)[0] == 2
        assert run(base + ["--target", "hat=1"], capsys)[0] == 2
        assert run(base + ["--target", "smile=2"], capsys)[0] == 2
        # neither --target nor --grid
        assert run(base, capsys)[0] == 2

    def test_unknown_attribute_lists_vocabulary(
        self, dataset, checkpoint, tmp_path, capsys
    ):
        image = str(sorted(dataset.glob("*.png"))[0])
        code, _, err = run([
            "edit", str(checkpoint / "checkpoint.twck"), image,
            "--target", "hat=1", "--output-dir", str(tmp_path),
        ], capsys)
        assert code == 2
        assert "glasses" in err and "smile" in err

    def test_corrupt_checkpoint(self, dataset, tmp_path, capsys):
        bogus = tmp_path / "bogus.twck"
        bogus.write_bytes(b"garbage")
        image = str(sorted(dataset.glob("*.png"))[0])
        code, _, err = run([
            "edit", str(bogus), image, "--target", "smile=1",
            "--output-dir", str(tmp_path),
        ], capsys)
        assert code == 2


class TestEvalVerify:
    def run_verify(self, dataset, checkpoint, out):
        return main([
            "eval-verify",
            str(checkpoint / "checkpoint.twck"),
            "--manifest", str(dataset / "manifest.csv"),
            "--n-client", "20",
            "--n-impostor", "20",
            "--seed", "0",
            "--output-dir", str(out),
        ])

    def test_writes_reports(self, dataset, checkpoint, tmp_path):
        assert self.run_verify(dataset, checkpoint, tmp_path) == 0
        summary = (tmp_path / "verification.txt").read_text()
        for key in ("auc", "eer", "ap", "tpr_at_fpr"):
            assert key in summary
        roc = (tmp_path / "roc.csv").read_text().splitlines()
        assert roc[0] == "fpr,tpr"
        assert len(roc) > 2
        assert (tmp_path / "pairs.csv").exists()

    def test_same_seed_identical_reports(self, dataset, checkpoint, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert self.run_verify(dataset, checkpoint, a) == 0
        assert self.run_verify(dataset, checkpoint, b) == 0
        for name in ("verification.txt", "roc.csv", "pairs.csv"):
            assert filecmp.cmp(a / name, b / name, shallow=False), name


class TestEvalCls:
    def test_writes_accuracy_and_confusion(self, dataset, checkpoint, tmp_path, capsys):
        code, out, _ = run([
            "eval-cls",
            str(checkpoint / "checkpoint.twck"),
            "--manifest", str(dataset / "manifest.csv"),
            "--seed", "0",
            "--output-dir", str(tmp_path),
        ], capsys)
        assert code == 0
        assert "accuracy=" in out
        text = (tmp_path / "accuracy.txt").read_text()
        acc = float(text.split("=")[1])
        assert 0.0 <= acc <= 1.0
        rows = (tmp_path / "confusion.csv").read_text().splitlines()
        assert len(rows) == 2  # one row per attribute bit

    def test_empty_test_split(self, checkpoint, tmp_path, capsys):
        cfg = write_config(
            tmp_path / "synth.yaml",
            image_size=16,
            n_identities=4,
            n_images=12,
            seed=1,
            test_fraction=0.0,
            output_dir="notest",
        )
        assert main(["synth-data", "--config", cfg]) == 0
        code, _, err = run([
            "eval-cls",
            str(checkpoint / "checkpoint.twck"),
            "--manifest", str(tmp_path / "notest" / "manifest.csv"),
            "--output-dir", str(tmp_path),
        ], capsys)
        assert code == 2


class TestCompareCurves:
    def test_compares_two_logs(self, tmp_path, capsys):
        from texwarp import train as train_mod

        def fake_log(path, offset):
            log = train_mod.LossLog()
            for step in range(20):
                log.add(step, "gan_frozen_dae", "gan/cls_fake",
                        offset + 0.01 * step, epoch=step // 5)
            log.save_csv(path)

        fake_log(tmp_path / "a.csv", 1.0)
        fake_log(tmp_path / "b.csv", 2.0)
        code, out, _ = run([
            "compare-curves",
            str(tmp_path / "a.csv"),
            str(tmp_path / "b.csv"),
            "--term", "gan/cls_fake",
            "--output-dir", str(tmp_path),
        ], capsys)
        assert code == 0
        assert "favors=a" in out
        assert (tmp_path / "curve_comparison.csv").exists()

    def test_missing_file(self, tmp_path, capsys):
        code, _, err = run([
            "compare-curves", str(tmp_path / "none.csv"), str(tmp_path / "none.csv"),
            "--output-dir", str(tmp_path),
        ], capsys)
        assert code == 2


class TestExitCodes:
    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == 2

    def test_no_arguments(self):
        assert main([]) == 2
