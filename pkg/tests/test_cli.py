import csv

import pytest

from hjblab.cli import main

CLOSED = """
[problem]
family = quadratic
dimension = 1
g.slope = 1

[grid]
R_x = 4
n_x = 33
n_t = 32
ladder = 3

[solver]
R0_control = 0.25

[mc]
n_paths = 4000
seed = 11
points = 0 0; 0.5 1
baselines = 0; 1

[certificates]
lipschitz_max = 1.05
sup_grad_max = 1.05
growth_max = 1.5
crosscheck = true

[output]
dir = unused
"""

NONTRIVIAL = CLOSED.replace("g.slope = 1", "g.slope = 1\nb2.matrix = 0.5\nb2.clamp = 2\n"
                            "f2.slope = 0.5\nf2.mode = clamped\nf2.clamp = 1")


def put(text, section, line):
    key = line.split("=")[0].strip()
    lines = [ln for ln in text.splitlines() if ln.split("=")[0].strip() != key]
    i = lines.index(f"[{section}]")
    lines.insert(i + 1, line)
    return "\n".join(lines) + "\n"


def run(tmp_path, text, command, *extra, name="run"):
    cfg = tmp_path / f"{name}.ini"
    cfg.write_text(text)
    out = tmp_path / name
    return main([command, "--config", str(cfg), "--out", str(out), "--quiet", *extra]), out


def read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_solve_outputs(tmp_path):
    code, out = run(tmp_path, CLOSED, "solve")
    assert code == 0
    u = read(out / "u.csv")
    assert u[0] == ["t", "x_1", "u", "grad_norm"]
    assert len(u) - 1 == 33 * 33  # (n_t + 1) layers of n_x nodes
    assert read(out / "controls.csv")[0] == ["t", "x_1", "a_1"]
    trace = read(out / "truncation_trace.csv")
    assert trace[0] == ["stage", "radius", "sup_grad", "delta_sup"]
    assert float(trace[-1][1]) >= 2.0
    manifest = dict(read(out / "manifest.csv")[1:])
    assert manifest["command"] == "solve" and len(manifest["config_sha256"]) == 64
    assert manifest["mc.seed"] == "11" and "numpy" in manifest


def test_negative_box_is_config_error(tmp_path):
    assert run(tmp_path, put(CLOSED, "grid", "R_x = -1"), "solve")[0] == 64


def test_unknown_key_is_config_error(tmp_path, capsys):
    assert run(tmp_path, put(CLOSED, "solver", "R_0 = 1"), "solve")[0] == 64
    assert "line" in capsys.readouterr().err


def test_forced_escalation_failure(tmp_path):
    code, out = run(tmp_path, put(CLOSED, "solver", "max_doublings = 0"), "solve")
    assert code == 2
    assert len(read(out / "truncation_trace.csv")) == 2


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["solve"])
    assert exc.value.code == 64


def test_certify_zero_problem(tmp_path):
    zero = CLOSED.replace("g.slope = 1", "g.slope = 0").replace("crosscheck = true", "")
    assert run(tmp_path, zero, "solve")[0] == 0
    code, out = run(tmp_path, zero, "certify")
    assert code == 0
    rows = read(out / "certificates.csv")
    assert rows[0] == ["certificate", "value", "threshold", "verdict", "core_fraction"]
    assert all(r[3] == "pass" for r in rows[1:])


def test_certify_spike_fails(tmp_path):
    code, out = run(tmp_path, CLOSED, "solve")
    rows = read(out / "u.csv")
    rows[16 + 1][2] = "60"  # t = 0, x = 0
    with open(out / "u.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    code, out = run(tmp_path, CLOSED, "certify")
    assert code == 1
    verdicts = {r[0]: r[3] for r in read(out / "certificates.csv")[1:]}
    assert verdicts["lipschitz_quotient"] == "fail" and verdicts["growth_L"] == "fail"


def test_certify_missing_column(tmp_path):
    code, out = run(tmp_path, CLOSED, "solve")
    rows = [r[:2] + r[3:] for r in read(out / "u.csv")]
    with open(out / "u.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    assert run(tmp_path, CLOSED, "certify")[0] == 65


def test_verify_closed_form(tmp_path):
    code, out = run(tmp_path, CLOSED, "verify")
    assert code == 0
    v = read(out / "verify.csv")
    assert v[0] == ["t", "x_1", "u_pde", "v_mc", "stderr", "verdict"]
    assert len(v) == 3 and all(r[-1] == "pass" for r in v[1:])
    assert len(read(out / "infimum.csv")) == 5
    assert read(out / "colehopf.csv")[1][3] == "pass"


def test_verify_zero_allowance(tmp_path, capsys):
    text = put(put(put(NONTRIVIAL, "mc", "allowance = 0"), "mc", "antithetic = true"), "mc", "baselines = ")
    code, _ = run(tmp_path, text, "verify")
    assert code == 3
    assert "MC mismatch" in capsys.readouterr().err


def test_verify_point_outside_core(tmp_path):
    assert run(tmp_path, put(CLOSED, "mc", "points = 0 3.5"), "verify")[0] == 64


def test_crosscheck_with_custom_family(tmp_path):
    text = CLOSED.replace("family = quadratic", "family = custom\ncontrol_radius = 4")
    assert run(tmp_path, text, "verify")[0] == 64


def test_ladder_closed_form(tmp_path):
    code, out = run(tmp_path, CLOSED, "ladder")
    assert code == 0
    rows = read(out / "ladder.csv")
    assert len(rows) == 4
    assert [(r[1], r[3]) for r in rows[1:]] == [("33", "4"), ("33", "8"), ("65", "4")]
    assert all(abs(float(r[7]) - 1.0) < 1e-9 for r in rows[1:])


def test_ladder_length_one(tmp_path):
    assert run(tmp_path, put(CLOSED, "grid", "ladder = 1"), "ladder")[0] == 64


def test_lemmas_small(tmp_path):
    text = CLOSED + "\n[lemmas]\nn_instances = 600\ndump = 5\n"
    code, out = run(tmp_path, text, "lemmas")
    rows = {r[0]: r for r in read(out / "lemmas.csv")[1:]}
    assert rows["trace_product_bound"][2] == "0"
    assert rows["doubling_matrix_bound_corrected"][2] == "0"
    assert int(rows["doubling_matrix_bound"][2]) > 0
    assert code == 1  # the stated doubling bound has counterexamples
    assert len(read(out / "lemma_instances.csv")) == 6


def test_bitwise_determinism_across_workers(tmp_path):
    text = put(CLOSED, "mc", "n_paths = 6000")
    a = run(tmp_path, text, "verify", name="a")[1]
    b = run(tmp_path, text, "verify", name="b")[1]
    c = run(tmp_path, put(text, "mc", "workers = 3"), "verify", name="c")[1]
    files = sorted(p.name for p in a.glob("*.csv"))
    assert "verify.csv" in files and "manifest.csv" in files
    for name in files:
        ref = (a / name).read_bytes()
        assert (b / name).read_bytes() == ref, name
        if name != "manifest.csv":
            assert (c / name).read_bytes() == ref, name
    # the manifest omits the worker count; the config hash still differs
    ma, mc = dict(read(a / "manifest.csv")[1:]), dict(read(c / "manifest.csv")[1:])
    assert {k for k in ma if ma[k] != mc[k]} == {"config_sha256"}


def test_seed_flag_overrides(tmp_path):
    code, out = run(tmp_path, CLOSED, "solve", "--seed", "99")
    assert dict(read(out / "manifest.csv")[1:])["mc.seed"] == "99"
