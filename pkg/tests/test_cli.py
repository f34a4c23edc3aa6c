import json

import pytest

from hcache.cli import main
from hcache.scheduler import RestorationPlan
from hcache.serving import Metrics, Trace


def call(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr().out


def test_gen_trace(tmp_path, capsys):
    out = tmp_path / "t.json"
    assert call(capsys, "gen-trace", "--kind", "long-context", "--seed", "3",
                "--param", "n_requests=5", "--out", str(out))[0] == 0
    trace = Trace.load(out)
    assert len(trace.requests) == 5 and trace.seed == 3
    _, text = call(capsys, "gen-trace", "--seed", "3")
    assert json.loads(text)["kind"] == "conversation"


def test_profile_sim_and_plan_from_file(tmp_path, capsys):
    timings = tmp_path / "timings.txt"
    call(capsys, "profile", "--model-preset", "7b", "--devices", "4", "--out", str(timings))
    text = timings.read_text()
    assert "io_h = " in text and "n_layers = 32" in text
    _, out = call(capsys, "plan", "--timings", str(timings))
    assert out.startswith("plan = ")
    (tmp_path / "fixed.txt").write_text(
        "io_h = 0.26\nio_kv = 0.52\nc_h = 0.28\nc_token = 1.0\nn_layers = 32\n")
    _, out = call(capsys, "plan", "--timings", str(tmp_path / "fixed.txt"))
    assert "plan = 31 H + 1 KV" in out
    assert "makespan_s = 8.68" in out


def test_plan_flags_change_the_split(capsys):
    _, one = call(capsys, "plan", "--devices", "1")
    _, four = call(capsys, "plan", "--devices", "4", "--flops", "1e15")
    assert one != four
    assert "RE" in one


def test_profile_wall(tmp_path, capsys):
    _, out = call(capsys, "profile", "--mode", "wall", "--model-preset", "7b", "--minibatch", "64",
                  "--devices", "2", "--workdir", str(tmp_path / "w"))
    values = dict(line.split(" = ") for line in out.strip().splitlines())
    assert float(values["io_kv"]) > float(values["io_h"]) > 0


def test_run_and_report(tmp_path, capsys):
    trace = tmp_path / "trace.json"
    call(capsys, "gen-trace", "--param", "n_sessions=2", "--param", "rounds=2",
         "--param", "mean_output=6", "--param", "mean_input=6", "--out", str(trace))
    out_dir = tmp_path / "runs"
    code, text = call(capsys, "run", "--trace", str(trace), "--strategy", "hcache,kv_offload",
                      "--strategy", "ideal", "--out", str(out_dir))
    assert code == 0
    assert "ttft_ratio" in text
    files = sorted(p.name for p in out_dir.glob("*.json"))
    assert files == ["hcache.json", "ideal.json", "kv_offload.json"]
    m = Metrics.from_json((out_dir / "hcache.json").read_text())
    assert len(m.requests) == 4
    _, table = call(capsys, "report", str(out_dir), "--format", "csv")
    assert table.splitlines()[0].startswith("strategy,")
    assert len(table.splitlines()) == 4
    _, single = call(capsys, "report", str(out_dir / "ideal.json"))
    assert "ttft_ratio" not in single


def test_run_rejects_wall_mode(capsys):
    with pytest.raises(SystemExit):
        main(["run", "--mode", "wall"])


def test_ablate_sections(capsys):
    _, out = call(capsys, "ablate", "--what", "partition", "--model-preset", "13b",
                  "--devices", "1")
    lines = out.splitlines()
    ratios = {line.split()[0]: float(line.split()[-1]) for line in lines[1:4]}
    assert ratios["layer-wise"] == 1.0
    assert 1.0 < ratios["rounded"] < ratios["token-wise"]
    _, out = call(capsys, "ablate", "--what", "saving", "--devices", "1", "--device-bw", "0.5e9",
                  "--write-latency", "50e-6")
    assert "batch  16" in out
    _, out = call(capsys, "ablate", "--what", "bubble")
    assert "kv-offload" in out and "scheduled" in out


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "hcache.conf"
    cfg.write_text("# platform\nmodel_preset = 13b\ndevices = 1\n")
    _, from_file = call(capsys, "plan", "--config", str(cfg))
    _, from_flags = call(capsys, "plan", "--model-preset", "13b", "--devices", "1")
    assert from_file == from_flags
    _, overridden = call(capsys, "plan", "--config", str(cfg), "--devices", "4")
    assert overridden != from_file
    cfg.write_text("wheels = 4\n")
    with pytest.raises(SystemExit):
        main(["plan", "--config", str(cfg)])


def test_bad_input_exits_cleanly(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["plan", "--timings", str(tmp_path / "missing.txt")])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        main(["run", "--strategy", "magic"])


def test_plan_record_format(capsys):
    (_, out) = call(capsys, "plan", "--model-preset", "30b", "--devices", "4")
    record = next(l for l in out.splitlines() if l.startswith("record = "))[len("record = "):]
    assert isinstance(RestorationPlan.from_record(record), RestorationPlan)
