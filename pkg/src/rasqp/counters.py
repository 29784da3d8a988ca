"""Per-run cost counters.

One Counters object belongs to one solver run; concurrent runs each own
their counters and the harness merges results afterwards.
"""

from dataclasses import dataclass


@dataclass
class Counters:
    gradient_evals: int = 0
    function_evals: int = 0
    minres_iters: int = 0
    barrier_iters: int = 0

    def copy(self):
        return Counters(self.gradient_evals, self.function_evals,
                        self.minres_iters, self.barrier_iters)
