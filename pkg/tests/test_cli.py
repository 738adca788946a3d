import pytest

from papaformer.cli import EXIT_COMPOSITION, EXIT_CONFIG, EXIT_DATA, load_config, main, train_config_from

TINY_MODEL = """
model:
  d_model: 32
  d_path: 16
  n_layer_blocks: 1
  n_parallel_layers: {n_parallel}
  k_paths: 2
  heads_layer: 2
  heads_path: 2
  ff_layer: 64
  ff_path: 32
  max_seq_len: 16
  connection_kind: {kind}
train:
  lr: 0.001
  batch_size: 2
  grad_accum_steps: 2
  epochs: 1
  max_steps: 2
"""

TINY_PATH = """
model:
  d_model: 16
  n_layer_blocks: 1
  heads_layer: 2
  ff_layer: 32
  max_seq_len: 16
train:
  lr: 0.001
  batch_size: 2
  grad_accum_steps: 2
  epochs: 1
  max_steps: 2
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["pretokenize", "--synthetic", "40", "--seq-len", "16", "--seed", "7", "--out", str(d / "store.ppch")]) == 0
    (d / "gumbel.yaml").write_text(TINY_MODEL.format(n_parallel=1, kind="gumbel_v1"))
    (d / "path.yaml").write_text(TINY_PATH)
    (d / "prompts.tsv").write_text("story\tOnce upon a time\nmath\t3 + 4 =\n")
    return d


class TestPretokenize:
    def test_reports_four_sub_collections(self, workdir, capsys):
        assert main(["pretokenize", "--synthetic", "30", "--seq-len", "16", "--out", str(workdir / "s2.ppch")]) == 0
        out = capsys.readouterr().out
        for line in ("story sub60", "story sub40", "math sub60", "math sub40"):
            assert line in out

    def test_same_seed_byte_identical(self, workdir):
        a, b = workdir / "det_a.ppch", workdir / "det_b.ppch"
        for p in (a, b):
            assert main(["pretokenize", "--synthetic", "25", "--seq-len", "16", "--seed", "3", "--out", str(p)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_token_counts_match_chunk_math(self, workdir, capsys):
        main(["pretokenize", "--synthetic", "30", "--seq-len", "16", "--out", str(workdir / "s3.ppch")])
        out = capsys.readouterr().out
        for line in out.splitlines():
            if "epoch" in line:
                n = int(line.split(":")[1].split()[0])
                tokens = int(line.split("(")[1].split()[0])
                assert tokens == n * 16

    def test_no_corpora(self, workdir, capsys):
        assert main(["pretokenize", "--out", str(workdir / "x.ppch")]) == EXIT_DATA
        assert "error: data" in capsys.readouterr().err


class TestTrain:
    def test_path1_trains_and_logs(self, workdir, capsys):
        out = str(workdir / "path1.ppck")
        rc = main([
            "train", "--config", str(workdir / "path.yaml"), "--data", str(workdir / "store.ppch"),
            "--role", "path1", "--seed", "11", "--out", out,
        ])
        assert rc == 0
        stdout = capsys.readouterr().out
        assert "trained 2 steps" in stdout
        log_lines = (workdir / "path1.ppck.log").read_text().splitlines()
        assert len(log_lines) == 2
        assert log_lines[0].startswith("step=1 ")

    def test_train_path2(self, workdir):
        rc = main([
            "train", "--config", str(workdir / "path.yaml"), "--data", str(workdir / "store.ppch"),
            "--role", "path2", "--seed", "11", "--out", str(workdir / "path2.ppck"),
        ])
        assert rc == 0

    def test_missing_config(self, workdir, capsys):
        rc = main(["train", "--config", "nope", "--data", str(workdir / "store.ppch"), "--out", str(workdir / "x.ppck")])
        assert rc == EXIT_CONFIG
        assert "error: config" in capsys.readouterr().err

    def test_missing_data(self, workdir, capsys):
        rc = main(["train", "--config", str(workdir / "path.yaml"), "--data", str(workdir / "no.ppch"), "--out", str(workdir / "x.ppck")])
        assert rc == EXIT_DATA

    def test_env_seed_override(self, monkeypatch):
        monkeypatch.setenv("PAPA_SEED", "99")
        cfg = train_config_from({"train": {"seed": 1}})
        assert cfg.seed == 99


class TestCompose:
    def test_compose_then_analyze_and_generate(self, workdir, capsys):
        composite = str(workdir / "composite.ppck")
        rc = main([
            "compose", str(workdir / "path1.ppck"), str(workdir / "path2.ppck"),
            "--config", str(workdir / "gumbel.yaml"), "--out", composite,
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "concatenated" in out and "reused" in out and "fresh" in out
        assert (workdir / "composite.ppck.provenance.json").exists()

        rc = main(["analyze", "--checkpoint", composite, "--data", str(workdir / "store.ppch"), "--prompts", str(workdir / "prompts.tsv")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "accuracy" in out and "selection=" in out

        rc = main([
            "generate", "--checkpoint", composite, "--data", str(workdir / "store.ppch"),
            "--prompt", "Once upon a time", "--max-new-tokens", "3",
        ])
        assert rc == 0
        out = capsys.readouterr().out
        assert "next token predictions" in out and "%" in out

    def test_finetune_from_composed_checkpoint(self, workdir, capsys):
        rc = main([
            "train", "--config", str(workdir / "gumbel.yaml"), "--data", str(workdir / "store.ppch"),
            "--role", "composite", "--init", str(workdir / "composite.ppck"),
            "--out", str(workdir / "final.ppck"),
        ])
        assert rc == 0
        assert "trained 2 steps" in capsys.readouterr().out

    def test_init_config_mismatch(self, workdir, capsys):
        rc = main([
            "train", "--config", str(workdir / "path.yaml"), "--data", str(workdir / "store.ppch"),
            "--init", str(workdir / "composite.ppck"), "--out", str(workdir / "x.ppck"),
        ])
        assert rc == EXIT_CONFIG
        assert "does not match" in capsys.readouterr().err

    def test_wrong_checkpoint_count(self, workdir, capsys):
        rc = main([
            "compose", str(workdir / "path1.ppck"),
            "--config", str(workdir / "gumbel.yaml"), "--out", str(workdir / "bad.ppck"),
        ])
        assert rc == EXIT_COMPOSITION
        assert "error: composition" in capsys.readouterr().err

    def test_inspect_checkpoint(self, workdir, capsys):
        rc = main(["inspect-checkpoint", str(workdir / "composite.ppck")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "total scalars" in out and "[concatenated]" in out


class TestCountParams:
    def test_base_256_preset_is_32m_class(self, capsys):
        assert main(["count-params", "--config", "base_256"]) == 0
        total = int(capsys.readouterr().out.splitlines()[-1].split()[0].replace(",", ""))
        assert 29e6 < total < 36e6

    def test_parallel_presets_parse(self, capsys):
        for preset in ("base_192", "path", "parallel_share_linear", "parallel_gumbel_v1", "parallel_gumbel_v2"):
            assert main(["count-params", "--config", preset]) == 0
        capsys.readouterr()

    def test_unknown_preset(self, capsys):
        assert main(["count-params", "--config", "base_999"]) == EXIT_CONFIG


class TestConfigLoading:
    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "bad.yaml"
        p.write_text("model: {}\nmystery: 1\n")
        rc = main(["count-params", "--config", str(p)])
        assert rc == EXIT_CONFIG

    def test_unknown_model_key_rejected(self, tmp_path, capsys):
        p = tmp_path / "bad2.yaml"
        p.write_text("model:\n  vocab_size: 10\n  d_modell: 64\n")
        assert main(["count-params", "--config", str(p)]) == EXIT_CONFIG
        assert "d_modell" in capsys.readouterr().err

    def test_preset_loads_as_mapping(self):
        raw = load_config("base_256")
        assert raw["model"]["d_model"] == 256
