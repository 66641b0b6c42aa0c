import csv
import subprocess
import sys

import pytest

from qkvcomm import cachefile
from qkvcomm.calibration import load_profile
from qkvcomm.cli import main
from qkvcomm.wire import deserialize

CONFIG = """\
# small synthetic model
num_layers = 6
num_heads = 2
seq_len = 16
head_dim = 8
per_layer_std = 0.5, 1, 1.5, 2, 2.5, 3
seed = 7
model_id = tiny
facts_budget = 4
"""

TEXT = "The Billing Service exposes GET /v2/invoices with 60 requests per minute."


@pytest.fixture
def work(tmp_path):
    (tmp_path / "cfg.txt").write_text(CONFIG)
    (tmp_path / "ctx.txt").write_text(TEXT)
    assert main(["generate", "--config", str(tmp_path / "cfg.txt"), "--out", str(tmp_path / "c.qkvt")]) == 0
    return tmp_path


def test_generate_writes_cache(work, capsys):
    cache = cachefile.read_cache(work / "c.qkvt")
    assert cache.num_layers == 6 and cache.shape == (1, 2, 16, 8) and cache.model_id == "tiny"


def test_compress_decompress(work, capsys):
    capsys.readouterr()
    rc = main(["compress", str(work / "c.qkvt"), "--config", str(work / "cfg.txt"),
               "--text", str(work / "ctx.txt"), "--out", str(work / "p.qkvc")])
    assert rc == 0
    fields = dict(line.split("=", 1) for line in capsys.readouterr().out.splitlines())
    size = (work / "p.qkvc").stat().st_size
    assert int(fields["payload_bytes"]) == size
    assert float(fields["compression_ratio"]) == 6 * 2 * 2 * 16 * 8 * 4 / size
    assert fields["selected_layers"] == "5"

    rc = main(["decompress", str(work / "p.qkvc"), "--out", str(work / "r.qkvt"),
               "--summary-out", str(work / "facts.txt")])
    assert rc == 0
    back = cachefile.read_cache(work / "r.qkvt")
    assert back.num_layers == deserialize((work / "p.qkvc").read_bytes()).header.selected_layers
    assert ",".join(map(str, back.indices)) == fields["layer_indices"]
    assert (work / "facts.txt").read_text().startswith("FACTS(")


def test_exit_codes(work, tmp_path):
    assert main(["compress", str(tmp_path / "missing.qkvt"), "--out", str(tmp_path / "x")]) == 2
    assert main(["generate", "--out", str(tmp_path / "x")]) == 2  # spec keys missing
    assert main(["nonsense"]) == 2
    (tmp_path / "bad.qkvc").write_bytes(b"QKVC\x01\x00garbage")
    assert main(["decompress", str(tmp_path / "bad.qkvc"), "--out", str(tmp_path / "y")]) == 3
    (tmp_path / "bad.cfg").write_text("colour = blue\n")
    assert main(["bench", "--config", str(tmp_path / "bad.cfg")]) == 2


def test_send_to_closed_port_exits_4(work):
    import socket
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    assert main(["send", str(work / "c.qkvt"), "--address", f"127.0.0.1:{port}"]) == 4


def test_profile_table(work, capsys):
    capsys.readouterr()
    assert main(["profile", str(work / "c.qkvt")]) == 0
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()]
    assert [r[0] for r in rows] == [str(i) for i in range(6)]
    buckets = [r[2] for r in rows]
    assert buckets.count("max") == 2 and buckets.count("min") == 2
    assert {r[3] for r in rows if r[2] == "max"} == {"8"}


def test_bench_table_and_csv(work, capsys):
    capsys.readouterr()
    assert main(["bench", "--config", str(work / "cfg.txt"), "--csv", str(work / "b.csv")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["bits", "ratio", "payload_bytes", "mse", "elapsed_s"]
    assert [line.split()[0] for line in out[1:]] == ["4", "6", "8"]
    with open(work / "b.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    ratios = [float(r["ratio"]) for r in rows]
    assert ratios[0] > ratios[1] > ratios[2]


def test_extract(work, capsys):
    capsys.readouterr()
    assert main(["extract", str(work / "ctx.txt"), "--budget", "8"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("FACTS(8):") and "- [endpoint] GET /v2/invoices\n" in out


def test_calibrate(work, capsys):
    assert main(["calibrate", str(work / "c.qkvt"), "--mode", "scalar", "--pooled",
                 "--out", str(work / "p.qkvp")]) == 0
    prof = load_profile((work / "p.qkvp").read_bytes())
    assert prof.mode == "scalar" and len(prof.per_layer) == 1 and prof.model_id == "tiny"


def test_serve_and_send_loopback(work):
    out_dir = work / "inbox"
    server = subprocess.Popen(
        [sys.executable, "-m", "qkvcomm", "serve", "--address", "127.0.0.1:0",
         "--out", str(out_dir), "--max-frames", "2"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        line = server.stdout.readline().strip()
        assert line.startswith("listening=")
        address = line.split("=", 1)[1]
        sender = subprocess.run(
            [sys.executable, "-m", "qkvcomm", "send", str(work / "c.qkvt"), "--address", address,
             "--config", str(work / "cfg.txt"), "--text", str(work / "ctx.txt"), "--count", "2"],
            capture_output=True, text=True, timeout=30)
        assert sender.returncode == 0, sender.stderr
        rest, _ = server.communicate(timeout=30)
    finally:
        if server.poll() is None:
            server.kill()
    assert server.returncode == 0
    assert "frames=2" in rest
    first = cachefile.read_cache(out_dir / "payload_0000.qkvt")
    second = cachefile.read_cache(out_dir / "payload_0001.qkvt")
    assert first.equals(second) and first.num_layers == 5
    assert (out_dir / "payload_0000.facts.txt").read_text().startswith("FACTS(4):")
