import numpy as np
import pytest

from rnngrad import cli, data, model
from rnngrad.cells import CellKind


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    rng = np.random.default_rng(0)
    words = ["aba", "bab", "abba", "baab"]
    lines = []
    for _ in range(400):
        count = rng.integers(3, 8)
        lines.append(" ".join(words[rng.integers(len(words))]
                              for _ in range(count)))
    text = "\n".join(lines) + "\n"
    train = root / "train.txt"
    valid = root / "valid.txt"
    train.write_text(text)
    valid.write_text(text[: len(text) // 4])
    return train, valid


def tiny_overrides(train, valid, out_dir, **extra):
    base = {
        "vocab_mode": "char", "max_vocab": 64, "num_layers": 1,
        "hidden_dim": 8, "context_length": 12, "batch_size": 8,
        "epochs": 1, "train_path": str(train), "valid_path": str(valid),
        "out_dir": str(out_dir), "shuffle": "true",
    }
    base.update(extra)
    return [f"{k}={v}" for k, v in base.items()]


class TestConfigParsing:
    def test_file_plus_overrides(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("hidden_dim = 32  # width\n\n# comment line\nlr = 5e-4\n")
        run = cli.build_run_config(str(cfg), ["hidden_dim=64", "epochs=2"])
        assert run.hidden_dim == 64      # CLI wins over file
        assert run.lr == 5e-4
        assert run.epochs == 2

    def test_defaults_match_word_preset(self):
        run = cli.build_run_config(None, [])
        assert (run.num_layers, run.hidden_dim, run.context_length) == (3, 256, 64)
        assert (run.batch_size, run.lr, run.weight_decay) == (128, 1e-3, 1e-4)
        assert run.epochs == 30
        assert run.schedule == "step"
        assert run.milestones == (10, 20)
        assert run.lr_factor == 0.1
        assert run.max_vocab == 10000

    def test_unknown_key_rejected(self):
        with pytest.raises(cli.UsageError, match="unknown config key"):
            cli.build_run_config(None, ["hidden_dims=4"])

    def test_bad_value_rejected(self):
        with pytest.raises(cli.UsageError, match="bad value"):
            cli.build_run_config(None, ["epochs=three"])

    def test_bool_and_tuple_coercion(self):
        run = cli.build_run_config(None, ["shuffle=off", "milestones=3,7,9",
                                          "transformer_like=1"])
        assert run.shuffle is False
        assert run.milestones == (3, 7, 9)
        assert run.transformer_like is True

    def test_malformed_config_line(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("hidden_dim 32\n")
        with pytest.raises(cli.UsageError, match="key = value"):
            cli.build_run_config(str(cfg), [])

    def test_env_seed_wins(self, monkeypatch):
        monkeypatch.setenv("RNN_SEED", "99")
        run = cli.build_run_config(None, ["seed=5"])
        assert run.seed == 99

    def test_missing_config_is_data_error(self):
        with pytest.raises(cli.DataError, match="not found"):
            cli.build_run_config("/definitely/not/here.cfg", [])


class TestTrain:
    def test_completes_and_writes_artifacts(self, tiny_corpus, tmp_path):
        train, valid = tiny_corpus
        out = tmp_path / "run"
        code = cli.main(["train"] + tiny_overrides(train, valid, out))
        assert code == 0
        assert (out / "final.ckpt").exists()
        assert (out / "best.ckpt").exists()
        epochs = (out / cli.EPOCH_CSV).read_text().splitlines()
        assert epochs[0] == "epoch,train_ppl,valid_ppl,lr,wall_s"
        assert len(epochs) == 2
        steps = (out / cli.STEP_CSV).read_text().splitlines()
        assert steps[0] == "step,loss,lr"
        assert len(steps) > 2

    def test_engine_override_runs(self, tiny_corpus, tmp_path):
        train, valid = tiny_corpus
        out = tmp_path / "scan"
        code = cli.main(["train"] + tiny_overrides(train, valid, out,
                                                   engine="DSF_Scan"))
        assert code == 0

    def test_determinism_across_runs(self, tiny_corpus, tmp_path):
        train, valid = tiny_corpus
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code = cli.main(["train"] + tiny_overrides(train, valid, out,
                                                       epochs=2, seed=3))
            assert code == 0
            outs.append(out)
        first, second = outs
        assert (first / cli.STEP_CSV).read_bytes() == \
            (second / cli.STEP_CSV).read_bytes()
        # epoch rows match except the wall-clock column
        rows_a = (first / cli.EPOCH_CSV).read_text().splitlines()
        rows_b = (second / cli.EPOCH_CSV).read_text().splitlines()
        assert len(rows_a) == len(rows_b)
        for ra, rb in zip(rows_a[1:], rows_b[1:]):
            assert ra.split(",")[:4] == rb.split(",")[:4]

    def test_missing_corpus_is_data_error(self, tmp_path):
        code = cli.main(["train", "train_path=/no/such.txt",
                         f"out_dir={tmp_path}"])
        assert code == cli.EXIT_DATA

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_numeric(self, tiny_corpus, tmp_path, capsys):
        train, valid = tiny_corpus
        out = tmp_path / "boom"
        code = cli.main(["train"] + tiny_overrides(train, valid, out,
                                                   lr="1e18"))
        assert code == cli.EXIT_NUMERIC
        assert "non-finite" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(tiny_corpus, tmp_path_factory):
    train, valid = tiny_corpus
    out = tmp_path_factory.mktemp("trained")
    assert cli.main(["train"] + tiny_overrides(train, valid, out)) == 0
    return out, valid


class TestEval:
    def test_matches_training_log(self, trained, capsys):
        out, valid = trained
        code = cli.main(["eval", str(out / "final.ckpt"), str(valid)])
        assert code == 0
        line = capsys.readouterr().out.strip().splitlines()[-1]
        printed = float(line.split("valid_ppl=")[1].split()[0])
        last = (out / cli.EPOCH_CSV).read_text().splitlines()[-1]
        logged = float(last.split(",")[2])
        assert abs(printed - logged) <= 1e-9 * logged

    def test_corrupted_magic_rejected(self, trained, tmp_path, capsys):
        out, valid = trained
        blob = bytearray((out / "final.ckpt").read_bytes())
        blob[:4] = b"XXXX"
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(blob))
        code = cli.main(["eval", str(bad), str(valid)])
        assert code == cli.EXIT_DATA
        assert "data error" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path, capsys):
        code = cli.main(["eval", str(tmp_path / "none.ckpt"), "x.txt"])
        assert code == cli.EXIT_DATA

    def test_uniform_head_gives_vocab_ppl(self, tmp_path, capsys):
        # eight regular tokens plus the two specials: vocabulary of ten;
        # a zero head scores every token equally so ppl equals the size
        tokens = [data.UNK_TOKEN, data.EOS_TOKEN] + list("abcdefgh")
        vocab = data.vocab_from_tokens(tokens, "char")
        cfg = model.ModelConfig(cell_kind=CellKind.GRU, num_layers=1,
                                hidden_dim=6, vocab_size=10,
                                context_length=4, seed=0)
        params = model.init_params(cfg)
        params.head_w[:] = 0.0
        params.head_b[:] = 0.0
        ckpt = tmp_path / "uniform.ckpt"
        model.save_checkpoint(ckpt, params,
                              extra={"vocab_tokens": vocab.id_to_token,
                                     "vocab_mode": "char", "batch_size": 2})
        text = tmp_path / "text.txt"
        text.write_text("abcd efgh\n" * 20)
        code = cli.main(["eval", str(ckpt), str(text)])
        assert code == 0
        line = capsys.readouterr().out.strip().splitlines()[-1]
        ppl = float(line.split("valid_ppl=")[1].split()[0])
        assert abs(ppl - 10.0) <= 1e-6


class TestGradcheckCmd:
    def test_cells_scope_passes(self, capsys):
        assert cli.main(["gradcheck", "cells"]) == 0
        out = capsys.readouterr().out
        assert out.count("[PASS]") == 3

    def test_engines_scope_passes(self):
        assert cli.main(["gradcheck", "engines"]) == 0

    def test_negative_control_fails(self, capsys):
        code = cli.main(["gradcheck", "engines", "--negative-control"])
        assert code == cli.EXIT_CHECK
        assert "[FAIL]" in capsys.readouterr().out

    def test_bad_scope_usage_error(self):
        assert cli.main(["gradcheck", "everything"]) == cli.EXIT_USAGE


class TestBenchCmd:
    def test_csv_and_exponent_output(self, tmp_path, capsys):
        out = tmp_path / "bench.csv"
        code = cli.main(["bench", "--sweep", "T", "--engines", "FTBPTT",
                         "--reps", "5", "--out", str(out)])
        assert code == 0
        text = capsys.readouterr().out
        assert "exponent engine=FTBPTT axis=T" in text
        rows = out.read_text().splitlines()
        assert rows[0] == "engine,d,T,median_ns,iqr_ns,reps"
        assert len(rows) == 5

    def test_unknown_engine_usage_error(self, capsys):
        assert cli.main(["bench", "--sweep", "d", "--engines", "Nope"]) == \
            cli.EXIT_USAGE
        assert "unknown engine" in capsys.readouterr().err


class TestTopLevel:
    def test_no_subcommand_is_usage_error(self):
        assert cli.main([]) == cli.EXIT_USAGE

    def test_unknown_subcommand_is_usage_error(self):
        assert cli.main(["frobnicate"]) == cli.EXIT_USAGE
