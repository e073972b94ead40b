"""Smoke test for the Python bindings.

Build and install first:
    pip install maturin
    pip install --no-build-isolation ./crates/py
"""

import math
import sys
import tempfile
from pathlib import Path

import attn_stages_py as at


def close(a, b, tol):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def main():
    assert close(at.stationary(3, 0.75, [1.0, -1.0], 0.01), [0.75, 0.135, 0.115], 1e-12)
    p = at.transition([0.75, 0.25], 0.8)
    assert close(p[0] + p[1], [0.95, 0.05, 0.15, 0.85], 1e-15)

    seqs, labels = at.sample([0.6, 0.3, 0.1], 0.7, 20, 8, 3)
    assert len(seqs) == 20 and all(len(s) == 8 for s in seqs) and len(labels) == 20
    assert (seqs, labels) == at.sample([0.6, 0.3, 0.1], 0.7, 20, 8, 3)

    pi, lam, m = [0.55, 0.3, 0.15], 0.7, 4
    theta = at.init(3, m, 0.3, 5)
    loss, grad = at.loss_and_grad(pi, lam, m, theta)
    assert loss > 0
    h = 1e-6
    for i in (0, 7, len(theta) - 1):
        up = list(theta)
        dn = list(theta)
        up[i] += h
        dn[i] -= h
        fd = (at.loss_and_grad(pi, lam, m, up)[0] - at.loss_and_grad(pi, lam, m, dn)[0]) / (2 * h)
        assert abs(fd - grad[i]) < 1e-6 + 1e-4 * abs(grad[i]), (i, fd, grad[i])
    zero_loss, zero_grad = at.loss_and_grad(pi, lam, m, [0.0] * len(theta))
    assert abs(zero_loss - math.log(3)) < 1e-14 and not any(zero_grad)

    cp = at.second_critical_point(3, 0.75, 0.8, 4)
    assert cp["grad_norm"] < 1e-9 and cp["attention_rate"] > 0

    names = [p[0] for p in at.presets()]
    assert len(names) >= 5 and "synthetic-fig2" in names

    with tempfile.TemporaryDirectory() as tmp:
        out, status = at.run_preset("kappa1-demo", Path(tmp) / "k")
        assert status is None, status
        assert (Path(out) / "manifest.json").exists()
        try:
            at.run_preset("kappa1-demo", Path(tmp) / "k")
        except ValueError:
            pass
        else:
            raise AssertionError("existing run directory was reused")

    try:
        at.stationary(3, 0.75, [1.0, -1.0], 0.2)
    except ValueError as e:
        assert "delta" in str(e)
    else:
        raise AssertionError("invalid delta accepted")

    rows = at.verify("markov")
    failed = [r for r in rows if not r[2]]
    assert rows and not failed, failed
    print(f"smoke test ok ({len(rows)} markov checks)")


if __name__ == "__main__":
    sys.exit(main())
