"""Central-difference gradient oracle."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .memo import ReplayCache, ReplayDiverged
from .tensor import Tape, Tensor, backward


class OracleInvalidError(RuntimeError):
    pass


@dataclass
class ParamReport:
    name: str
    size: int
    max_err: float
    worst_index: int
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    replay: bool = False
    full_evals: int = 0
    params: list[ParamReport] = field(default_factory=list)

    @property
    def max_err(self) -> float:
        return max((p.max_err for p in self.params), default=0.0)

    @property
    def n_checked(self) -> int:
        return int(np.sum([p.size for p in self.params]))

    @property
    def passed(self) -> bool:
        return all(p.max_err <= self.tol for p in self.params)

    def failures(self) -> list[ParamReport]:
        return [p for p in self.params if p.max_err > self.tol]

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: {self.n_checked} entries in {len(self.params)} tensors, "
                f"max rel-err {self.max_err:.3e} (tol {self.tol:g}, eps {self.eps:g})")


def finite_diff_check(f: Callable[[], Tensor], params: Mapping[str, Tensor],
                      eps: float = 1e-5, tol: float = 1e-4, reuse: bool = True) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads the tensors in ``params`` directly, so
    the oracle perturbs ``p.data`` in place and restores it afterwards.  The
    error for an entry is ``|analytic - fd| / max(1, |fd|)``.

    With ``reuse`` the perturbed evaluations replay only the recorded ops
    downstream of the nudged tensor (see :mod:`motvla.numerics.memo`).  The
    first forward nudge of every tensor is evaluated both ways and must agree to the
    last bit; on any disagreement the check reverts to full evaluations.
    """
    with Tape() as tape:
        loss = f()
    analytic = backward(tape, loss, params)
    base = float(loss.data)
    cache = ReplayCache() if reuse else None
    if cache is not None:
        with cache:
            result = f()
    else:
        result = f()
    again = float(result.data)
    if base != again:
        raise OracleInvalidError(f"f is not deterministic: {base!r} vs {again!r}")

    report = GradCheckReport(eps=eps, tol=tol, replay=reuse)

    def evaluate(p: Tensor, verify: bool) -> float:
        if report.replay:
            try:
                fast = float(cache.propagate(result, (p,)).data)
            except ReplayDiverged:
                report.full_evals += 1
                return float(f().data)
            if not verify:
                return fast
            full = float(f().data)
            report.full_evals += 1
            if full == fast:
                return fast
            report.replay = False
            return full
        report.full_evals += 1
        return float(f().data)

    for name, p in params.items():
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        errs = np.empty(flat.size)
        fds = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate(p, i == 0)
            flat[i] = orig - eps
            fm = evaluate(p, False)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            fds[i] = fd
            errs[i] = abs(ga[i] - fd) / max(1.0, abs(fd))
        j = int(np.argmax(errs)) if errs.size else 0
        report.params.append(ParamReport(name, flat.size, float(errs.max(initial=0.0)), j,
                                         float(ga[j]) if ga.size else 0.0,
                                         float(fds[j]) if fds.size else 0.0))
    return report
