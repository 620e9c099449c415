import subprocess
import sys

import numpy as np
import pytest

from mtd import io
from mtd.core import default_signal
from mtd.cli import main


def generate(tmp_path, name, *extra):
    out = tmp_path / name
    code = main(["generate", "--out", str(out), *extra])
    assert code == 0
    return out


def test_generate_ws_default_parameters(tmp_path):
    out = generate(tmp_path, "ws.bin", "--mode", "ws", "--length", "10", "--num-samples",
                   "1000000", "--density", "0.3", "--seed", "1")
    y = io.read_measurement(out)
    s = io.read_support(f"{out}.support.txt", y.N, y.L)
    assert s.M == 30000 and s.min_gap() == 19
    np.testing.assert_array_equal(io.read_signal(f"{out}.signal.txt"), default_signal())


def test_generate_asd_default_parameters(tmp_path):
    out = generate(tmp_path, "asd.bin", "--mode", "asd", "--density", "0.5", "--seed", "2")
    y = io.read_measurement(out)
    s = io.read_support(f"{out}.support.txt", y.N, y.L)
    assert s.M == 50000 and s.min_gap() == 10


def test_generate_is_byte_identical(tmp_path):
    flags = ["--num-samples", "20000", "--sigma", "0.5", "--seed", "7"]
    a = generate(tmp_path, "a.bin", *flags)
    b = generate(tmp_path, "b.bin", *flags)
    for suffix in ("", ".signal.txt", ".support.txt"):
        assert open(f"{a}{suffix}", "rb").read() == open(f"{b}{suffix}", "rb").read()
    c = generate(tmp_path, "c.bin", "--num-samples", "20000", "--sigma", "0.5", "--seed", "8")
    assert open(a, "rb").read() != open(c, "rb").read()


def test_generate_from_psf_file(tmp_path):
    psf = tmp_path / "p.txt"
    psf.write_text("10 0.5\n12 0.5\n")
    out = generate(tmp_path, "p.bin", "--mode", "asd", "--num-samples", "20000",
                   "--psf-file", str(psf))
    y = io.read_measurement(out)
    gaps = set(np.diff(io.read_support(f"{out}.support.txt", y.N, y.L).starts).tolist())
    assert gaps <= {10, 12}


def test_stats_of_zero_measurement(tmp_path):
    from mtd.core import Measurement
    src = tmp_path / "z.bin"
    io.write_measurement(src, Measurement(np.zeros(100), 10, 0.0))
    assert main(["stats", "--input", str(src), "--out", str(tmp_path / "z.txt")]) == 0
    st = io.read_stats(tmp_path / "z.txt")
    assert st.a1 == 0 and not st.a2.any() and not st.a3.any()


def test_estimate_aa_noiseless_ws(tmp_path):
    src = generate(tmp_path, "ws.bin", "--num-samples", "100000", "--seed", "3")
    rep = tmp_path / "r.txt"
    assert main(["estimate", "--input", str(src), "--method", "aa", "--mode", "ws",
                 "--out", str(rep)]) == 0
    kv = io.read_keyvalue(rep)
    assert float(kv["rmse"][1]) <= 0.01
    assert kv["method"][1] == "aa" and kv["mode"][1] == "ws"
    assert io.read_signal(f"{rep}.signal.txt").size == 10
    # stats files feed AA identically
    st = tmp_path / "s.txt"
    main(["stats", "--input", str(src), "--out", str(st)])
    rep2 = tmp_path / "r2.txt"
    main(["estimate", "--input", str(st), "--method", "aa", "--mode", "ws",
          "--truth", f"{src}.signal.txt", "--out", str(rep2)])
    assert rep.read_text() == rep2.read_text()


def test_estimate_em_writes_priors_and_trace(tmp_path):
    src = generate(tmp_path, "e.bin", "--num-samples", "5000", "--sigma", "0.2", "--seed", "4")
    rep, trace = tmp_path / "r.txt", tmp_path / "t.csv"
    assert main(["estimate", "--input", str(src), "--method", "em", "--mode", "asd",
                 "--restarts", "1", "--max-iter", "20", "--trace", str(trace),
                 "--out", str(rep)]) == 0
    kv = io.read_keyvalue(rep)
    for key in ("log_likelihood", "prior_alpha0", "prior_alpha1", "prior_rho1", "rmse"):
        assert key in kv
    assert trace.read_text().startswith("restart,n_max,iteration,log_likelihood,rel_change\n")


def test_baselines_noiseless(tmp_path):
    src = generate(tmp_path, "b.bin", "--num-samples", "20000", "--seed", "5")
    for method in ("known-s", "deconv"):
        rep = tmp_path / f"{method}.txt"
        assert main(["baseline", "--input", str(src), "--method", method,
                     "--out", str(rep)]) == 0
        assert float(io.read_keyvalue(rep)["rmse"][1]) <= 1e-12


def test_exit_codes(tmp_path, capsys):
    assert main(["stats", "--input", str(tmp_path / "none.bin"), "--out",
                 str(tmp_path / "o.txt")]) == 2
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"MTDM" + b"\x00" * 10)
    assert main(["stats", "--input", str(bad), "--out", str(tmp_path / "o.txt")]) == 2
    assert "byte offset" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["generate"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["nonsense"])
    assert info.value.code == 1
    assert main(["generate", "--out", str(tmp_path / "x.bin"), "--density", "1e-9"]) == 1
    assert main(["generate", "--out", str(tmp_path / "x.bin"), "--num-samples", "100",
                 "--density", "0.99"]) == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mtd", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("generate", "stats", "estimate", "baseline", "bench", "report"):
        assert sub in res.stdout
