import json
from pathlib import Path

import pytest

from sftrl import cli
from sftrl import config as cfgmod
from sftrl.checkpoint import load_checkpoint
from sftrl.plots import PlotInputError, emit_plots, plot_from_data
from sftrl.policy import WORKERS_ENV, ConfigError, default_workers
from sftrl.runner import FAILED, MANIFEST, RunError, run_experiment

TINY = """\
name = tiny
seed = 3
stages = base, rl, sft, distill, mixed, merge
model.embed_dim = 8
model.num_layers = 1
model.num_heads = 2
model.context_len = 64
stage.base.kind = baseline
stage.base.target = 1.0
stage.base.max_queries = 64
stage.base.val_queries = 8
stage.base.warmup_steps = 0
stage.base.checkpoint_every = 2
stage.base.difficulties = 1,2
stage.rl.kind = rl
stage.rl.init = base
stage.rl.queries = 8
stage.rl.batch_size = 4
stage.rl.group_size = 2
stage.rl.max_new_tokens = 6
stage.sft.kind = sft
stage.sft.init = base
stage.sft.style = CONCISE
stage.sft.queries = 8
stage.distill.kind = distill
stage.distill.init = rl
stage.distill.queries = 4
stage.distill.n_samples = 2
stage.distill.max_new_tokens = 6
stage.distill.style = CONCISE
stage.mixed.kind = sft
stage.mixed.init = base
stage.mixed.dataset = distill
stage.merge.kind = merge
stage.merge.a = sft
stage.merge.b = rl
stage.merge.ratios = 0, 0.5, 1
eval.runs = 2
eval.queries = 6
eval.max_new_tokens = 6
eval.profile_runs = 2
eval.kl_queries = 2
"""


def tiny_spec(tmp_path, extra=""):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY + extra)
    return path


# --------------------------------------------------------------------------
# spec parsing


def test_parse_include_override_and_errors(tmp_path):
    (tmp_path / "common.cfg").write_text("seed = 1\nmodel.embed_dim = 16  # trailing comment\n")
    (tmp_path / "main.cfg").write_text("include = common.cfg\nname = x\nseed = 2\n")
    flat = cfgmod.parse_file(tmp_path / "main.cfg")
    assert flat == {"seed": "2", "model.embed_dim": "16", "name": "x"}
    assert cfgmod.render(flat) == "model.embed_dim = 16\nname = x\nseed = 2\n"
    assert cfgmod.parse_overrides(["a.b = 3", "c=x=y"]) == {"a.b": "3", "c": "x=y"}
    with pytest.raises(cfgmod.SpecError):
        cfgmod.parse_overrides(["novalue"])
    (tmp_path / "bad.cfg").write_text("name = x\njust words\n")
    with pytest.raises(cfgmod.SpecError, match="bad.cfg:2"):
        cfgmod.parse_file(tmp_path / "bad.cfg")
    (tmp_path / "loop.cfg").write_text("include = loop.cfg\n")
    with pytest.raises(cfgmod.SpecError, match="cycle"):
        cfgmod.parse_file(tmp_path / "loop.cfg")
    with pytest.raises(cfgmod.SpecError):
        cfgmod.parse_file(tmp_path / "missing.cfg")


@pytest.mark.parametrize(
    "extra,message",
    [
        ("stage.rl.kind = dance\n", "unknown kind"),
        ("stage.rl.colour = red\n", "unknown key"),
        ("stage.rl.init = nowhere\n", "not an earlier stage"),
        ("stage.rl.clip_epsilon = 1.5\n", "clip_epsilon"),
        ("stage.rl.batch_size = many\n", "cannot read"),
        ("stage.merge.method = ties\n", "base"),
        ("stage.merge.ratios = 0, 2\n", "ratios"),
        ("stage.mixed.dataset = sft\n", "not a distill stage"),
        ("stage.ghost.kind = rl\n", "not listed"),
        ("eval.profile = nobody\n", "profile"),
        ("flavour = mild\n", "unknown key"),
    ],
)
def test_invalid_spec_writes_nothing(tmp_path, extra, message):
    out = tmp_path / "out"
    with pytest.raises(cfgmod.SpecError, match=message):
        spec = cfgmod.load_spec(tiny_spec(tmp_path, extra), {"output_dir": str(out)})
        run_experiment(spec)
    assert not out.exists()


def test_builtin_recipes_validate():
    names = cli.recipe_names()
    assert names == sorted(["sft-quality", "kl-ablation", "easy-retention", "sft-vs-rl", "two-stage",
                            "interleaved", "progressive", "data-mixing", "merge-sweep"])
    for name in names:
        spec = cfgmod.load_spec(cli.recipe_path(name))
        assert spec.name == name and spec.stages[0].kind == "baseline"
    kl = cfgmod.load_spec(cli.recipe_path("kl-ablation"))
    rl = [s for s in kl.stages if s.kind == "rl"]
    assert sorted(s.params.kl_coefficient for s in rl) == [0.0, 0.005]
    assert len({(s.params.query_label, s.params.queries) for s in rl}) == 1


# --------------------------------------------------------------------------
# running


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    path = tiny_spec(root)
    dirs = [run_experiment(cfgmod.load_spec(path, {"output_dir": str(root / d)})) for d in ("a", "b")]
    return dirs


def test_run_tree_and_manifest_determinism(tiny_runs):
    a, b = tiny_runs
    ma = json.loads((a / MANIFEST).read_text())
    mb = json.loads((b / MANIFEST).read_text())
    assert ma == mb
    files = set(ma["files"])
    for rel in ["spec.cfg", "stages/base/checkpoint.bin", "stages/rl/metrics.jsonl", "stages/rl/queries.tsv",
                "stages/distill/dataset.jsonl", "stages/merge/ratio_0.5/checkpoint.bin", "eval/rl.tsv",
                "eval/merge@1.tsv", "analysis/gains.tsv", "analysis/words.tsv", "analysis/profile.tsv",
                "analysis/summary.tsv", "analysis/kl_rl.tsv", "analysis/merge_merge.tsv"]:
        assert rel in files, rel
    assert not (a / FAILED).exists()
    assert "output_dir" not in (a / "spec.cfg").read_text()
    params, _, meta = load_checkpoint(a / "stages/merge/ratio_0.5/checkpoint.bin")
    assert meta["method"] == "LINEAR" and meta["ratio"] == 0.5
    records = [json.loads(l) for l in (a / "stages/rl/metrics.jsonl").read_text().splitlines()]
    assert len(records) == 2
    for key in ("mean_reward", "mean_entropy", "mean_response_length", "length_truncation_ratio",
                "ppo_clip_fraction", "mean_kl_to_ref"):
        assert key in records[0]
    merge_rows = (a / "analysis/merge_merge.tsv").read_text().splitlines()
    assert merge_rows[0].startswith("ratio\tall\tdifficulty_1") and len(merge_rows) == 4


def test_rerun_into_existing_directory_is_refused(tiny_runs, tmp_path):
    a, _ = tiny_runs
    spec = cfgmod.load_spec(tiny_spec(tmp_path), {"output_dir": str(a.parent)})
    with pytest.raises(cfgmod.SpecError, match="already exists"):
        run_experiment(spec)


def test_stage_failure_leaves_marker(tmp_path):
    bad = tmp_path / "broken.jsonl"
    bad.write_text("this is not json\n")
    extra = f"stage.mixed.dataset = {bad}\n"
    spec = cfgmod.load_spec(tiny_spec(tmp_path, extra), {"output_dir": str(tmp_path / "out")})
    with pytest.raises(RunError, match="mixed"):
        run_experiment(spec)
    run_dir = tmp_path / "out" / "tiny"
    assert (run_dir / FAILED).read_text().startswith("stage mixed")
    manifest = json.loads((run_dir / MANIFEST).read_text())
    assert "stages/base/checkpoint.bin" in manifest["files"]


def test_plots_from_run(tiny_runs):
    a, _ = tiny_runs
    charts = emit_plots(a)
    names = {p.name for p in charts}
    assert {"dynamics_mean_reward.svg", "dynamics_loss.svg", "gains.svg", "words.svg", "merge_merge.svg"} <= names
    titles = {"gains": ("bar", "gain by level (pp)"), "words": ("bar", "lexicon word frequency"),
              "merge_merge": ("line", "merge accuracy by ratio")}
    for svg in charts:
        kind, title = titles.get(svg.stem, ("line", svg.stem[len("dynamics_"):]))
        before = svg.read_bytes()
        plot_from_data(svg.with_suffix(".tsv"), svg, kind, title)
        assert svg.read_bytes() == before, svg.name
    merge_rows = (a / "plots" / "merge_merge.tsv").read_text().splitlines()
    assert len(merge_rows) == 4


def test_plot_errors(tmp_path):
    with pytest.raises(PlotInputError, match="missing"):
        emit_plots(tmp_path)
    d = tmp_path / "stages" / "rl"
    d.mkdir(parents=True)
    (d / "metrics.jsonl").write_text("")
    with pytest.raises(PlotInputError, match="metrics.jsonl"):
        emit_plots(tmp_path)
    with pytest.raises(ValueError):
        (tmp_path / "x.tsv").write_text("a\tb\n1\t2\n")
        plot_from_data(tmp_path / "x.tsv", tmp_path / "x.svg", "pie")


# --------------------------------------------------------------------------
# command line


def test_workers_env(monkeypatch):
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert default_workers() == 1
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert default_workers() == 3
    monkeypatch.setenv(WORKERS_ENV, "zero")
    with pytest.raises(ConfigError):
        default_workers()


def test_cli_recipes_and_dry_run(capsys):
    assert cli.main(["recipes"]) == 0
    assert "kl-ablation" in capsys.readouterr().out.split()
    assert cli.main(["recipes", "merge-sweep"]) == 0
    assert "stage.linear.kind = merge" in capsys.readouterr().out
    assert cli.main(["run", "kl-ablation", "--dry-run", "--set", "seed=4"]) == 0
    out = capsys.readouterr().out
    assert "seed = 4\n" in out and "stage.rl_kl.kl_coefficient = 0.005\n" in out
    assert cli.main(["run", "no-such-recipe", "--dry-run"]) == 2
    assert cli.main(["run", "kl-ablation", "--dry-run", "--set", "stage.rl_kl.kind=dance"]) == 2
    assert cli.main(["recipes", "nope"]) == 2


def test_cli_single_stage_commands(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    base = tmp_path / "base"
    small = ["--set", "max_queries=32", "--set", "val_queries=4", "--set", "target=1.0",
             "--set", "warmup_steps=0", "--set", "checkpoint_every=2", "--set", "difficulties=1"]
    assert cli.main(["baseline", "--out", str(base)] + small) == 0
    ckpt = base / "checkpoint.bin"
    assert ckpt.is_file() and (base / "metrics.jsonl").is_file()
    rl = tmp_path / "rl"
    assert cli.main(["rl", "--init", str(ckpt), "--out", str(rl), "--set", "queries=4", "--set", "batch_size=4",
                     "--set", "group_size=2", "--set", "max_new_tokens=4"]) == 0
    assert (rl / "checkpoint.bin").is_file() and (rl / "queries.tsv").is_file()
    assert cli.main(["rl", "--out", str(tmp_path / "norl")]) == 2
    assert cli.main(["rl", "--init", str(ckpt), "--out", str(rl)]) == 2  # not empty
    merged = tmp_path / "merged"
    assert cli.main(["merge", "--a", str(ckpt), "--b", str(rl / "checkpoint.bin"), "--ratios", "0,0.5,1",
                     "--out", str(merged)]) == 0
    assert sorted(p.name for p in merged.iterdir()) == ["ratio_0", "ratio_0.5", "ratio_1"]
    assert cli.main(["merge", "--a", str(ckpt), "--b", str(ckpt), "--method", "ties", "--out", str(merged)]) == 2
    capsys.readouterr()
    m1, m2 = tmp_path / "m1.tsv", tmp_path / "m2.tsv"
    for ck, out in ((ckpt, m1), (rl / "checkpoint.bin", m2)):
        assert cli.main(["eval", str(ck), "--queries", "5", "--runs", "2", "--max-new-tokens", "6",
                         "--out", str(out)]) == 0
    assert capsys.readouterr().out.startswith("accuracy\t")
    an = tmp_path / "an"
    assert cli.main(["analyze", "--profile", str(m1), "--eval", f"rl={m2}", "--out", str(an)]) == 0
    assert (an / "gains.tsv").read_text().splitlines()[0] == "level\tpopulation\trl"
    assert cli.main(["analyze", "--profile", str(m1), "--eval", "oops", "--out", str(an)]) == 2
    data = tmp_path / "d.jsonl"
    assert cli.main(["data", "--queries", "3", "--style", "concise", "--out", str(data)]) == 0
    assert len(data.read_text().splitlines()) == 3
    assert cli.main(["eval", str(tmp_path / "missing.bin")]) == 2
    monkeypatch.setenv(WORKERS_ENV, "-2")
    assert cli.main(["eval", str(ckpt)]) == 2


def test_cli_run_and_plots(tmp_path, capsys):
    keep = [l for l in TINY.splitlines() if not l.startswith(("stages", "stage.sft", "stage.distill", "stage.mixed",
                                                              "stage.merge"))]
    spec = tmp_path / "small.cfg"
    spec.write_text("\n".join(keep + ["stages = base, rl"]) + "\n")
    assert cli.main(["run", str(spec), "--output-dir", str(tmp_path / "o")]) == 0
    run_dir = Path(capsys.readouterr().out.strip())
    assert (run_dir / MANIFEST).is_file()
    assert cli.main(["plots", str(run_dir)]) == 0
    assert cli.main(["plots", str(tmp_path / "nothing")]) == 2
