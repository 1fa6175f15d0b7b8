import json

from mdteam.cli import main
from mdteam.mock import CasePlan

from conftest import BASE_ROLES, make_case, write_dataset, write_panel


def setup(tmp_path, n=4):
    cases = [make_case(f"c{i}", gold="E") for i in range(n)]
    plans = {c.case_id: CasePlan(BASE_ROLES, {r: ["E" if i % 2 else "A"] for r in BASE_ROLES}) for i, c in enumerate(cases)}
    write_dataset(tmp_path / "data.jsonl", cases)
    write_dataset(tmp_path / "eval.jsonl", cases[:2])
    write_panel(tmp_path / "script.json", plans)
    (tmp_path / "run.yaml").write_text(
        "dataset_path: data.jsonl\n"
        "eval_path: eval.jsonl\n"
        "kb_dir: kb\n"
        "backend: {kind: mock, script: script.json}\n"
        "output_dir: out\n"
        "cross:\n  b: {name: other}\n"
    )
    return tmp_path / "run.yaml"


def test_run_train_then_test(tmp_path, capsys):
    cfg = setup(tmp_path)
    assert main(["run", "--config", str(cfg), "--mode", "Train"]) == 0
    assert "accuracy=0.5000" in capsys.readouterr().out
    metrics = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert metrics["n_cases"] == 4
    assert main(["run", "--config", str(cfg), "--mode", "Test", "--out", str(tmp_path / "out2")]) == 0
    assert (tmp_path / "out2" / "run_log.jsonl").exists()


def test_kb_export_import_round_trip(tmp_path, capsys):
    cfg = setup(tmp_path)
    main(["run", "--config", str(cfg), "--mode", "Train"])
    bundle = tmp_path / "bundle.jsonl"
    assert main(["kb", "export", "--kb", str(tmp_path / "kb"), "--out", str(bundle)]) == 0
    assert len(bundle.read_text().splitlines()) == 4
    assert main(["kb", "import", "--in", str(bundle), "--kb", str(tmp_path / "kb2")]) == 0
    for name in ("correct.jsonl", "chain.jsonl"):
        assert (tmp_path / "kb" / name).read_text() == (tmp_path / "kb2" / name).read_text()
    # Refuses to clobber without --force.
    assert main(["kb", "import", "--in", str(bundle), "--kb", str(tmp_path / "kb2")]) == 2


def test_cross_and_curve(tmp_path, capsys):
    cfg = setup(tmp_path)
    main(["run", "--config", str(cfg), "--mode", "Train"])
    kb = str(tmp_path / "kb")
    assert main(["cross", "--config", str(cfg), "--kb-a", kb, "--kb-b", kb, "--out", str(tmp_path / "cross")]) == 0
    rows = (tmp_path / "cross" / "cross.csv").read_text().splitlines()
    assert len(rows) == 1 + 6
    out = tmp_path / "curve.csv"
    assert main(["curve", "--config", str(cfg), "--checkpoint-every", "2", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[0] == "train_cases,correct_kb,chain_kb,accuracy,f1,n_scored"
    lines = out.read_text().splitlines()
    assert len(lines) == 1 + 3
    assert lines[1].startswith("0,0,0,")


def test_missing_kb_reports_error(tmp_path, capsys):
    cfg = setup(tmp_path)
    assert main(["run", "--config", str(cfg), "--mode", "Test"]) == 2
    assert "does not exist" in capsys.readouterr().err
