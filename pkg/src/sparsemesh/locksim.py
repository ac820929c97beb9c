"""Lock-acquisition checker for emitted programs.

Executes the instruction stream as a worklist over the recorded dependency
edges: an instruction becomes ready once its dependencies completed and its
lock is free.  A stuck worklist is a deadlock; acquiring a held lock is a
double acquire.  Layers synchronize at their boundaries, matching the
sequential per-layer schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

from .codegen import Program


class LockSimError(RuntimeError):
    pass


@dataclass
class SimStats:
    instructions: int
    steps: int
    max_parallel: int


def simulate(prog: Program) -> SimStats:
    total = 0
    steps = 0
    peak = 0
    for lc in prog.layers:
        n = len(lc.instrs)
        total += n
        done = [False] * n
        held: set[str] = set()
        remaining = n
        while remaining:
            ready = [i for i, ins in enumerate(lc.instrs)
                     if not done[i] and all(done[d] for d in ins.deps)]
            if not ready:
                stuck = [ins.lock or ins.kind for i, ins in enumerate(lc.instrs)
                         if not done[i]][:4]
                raise LockSimError(
                    f"deadlock in layer {lc.layer_id!r}: no instruction ready, "
                    f"pending {stuck}")
            for i in ready:
                lock = lc.instrs[i].lock
                if lock is not None:
                    if lock in held:
                        raise LockSimError(
                            f"double acquire of lock {lock} in layer {lc.layer_id!r}")
                    held.add(lock)
            peak = max(peak, len(ready))
            for i in ready:
                done[i] = True
                lock = lc.instrs[i].lock
                if lock is not None:
                    held.discard(lock)
            remaining -= len(ready)
            steps += 1
    return SimStats(total, steps, peak)
