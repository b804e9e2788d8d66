"""Cache budget planning.

Full-cache heads (volatile and pivot) keep every prefill entry. The leftover
budget under a global compression ratio rho is spread over the compressed
heads (anchor and satellite) inversely to their stability: the shakier a
head's attention, the longer its cache.

All rounding is explicit. Real-valued shares are integerized with the
largest-remainder method so the planned total equals round(N_comp * L_base)
exactly, where round is half-up. Lengths are then clamped to
[min_length, prefill_len] with a single proportional redistribution pass;
clamping can break exact conservation, which is the documented trade.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import floor
from typing import Optional

from .profiling import TaxonomyResult

HeadId = tuple  # (layer, head)


class BudgetError(ValueError):
    """Malformed budget configuration or inputs."""


class InfeasibleBudgetError(BudgetError):
    """The requested ratio cannot fund the full-cache heads."""


@dataclass(frozen=True)
class BudgetConfig:
    rho: float = 0.5  # target fraction of the uncompressed prefill cache
    epsilon: float = 1e-6  # keeps inverse-stability weights finite at s = 0
    min_length: int = 16  # floor for any compressed head's cache
    rounding: str = "largest_remainder"  # or "floor"

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise BudgetError(f"rho must be in (0, 1], got {self.rho}")
        if self.epsilon <= 0.0:
            raise BudgetError(f"epsilon must be positive, got {self.epsilon}")
        if self.min_length < 0:
            raise BudgetError(f"min_length must be nonnegative, got {self.min_length}")
        if self.rounding not in ("largest_remainder", "floor"):
            raise BudgetError(f"unknown rounding mode {self.rounding!r}")


@dataclass(frozen=True)
class BudgetPlan:
    rho: float
    prefill_len: int
    num_heads: int
    num_full: int
    num_comp: int
    l_base: float
    l_base_int: int
    lengths: dict  # compressed HeadId -> int

    @property
    def budget_ceiling(self) -> float:
        return self.rho * self.num_heads * self.prefill_len

    @property
    def planned_gpu_entries(self) -> int:
        return self.num_full * self.prefill_len + sum(self.lengths.values())

    def to_json_dict(self) -> dict:
        return {
            "rho": self.rho,
            "prefill_len": self.prefill_len,
            "num_heads": self.num_heads,
            "num_full": self.num_full,
            "num_comp": self.num_comp,
            "l_base": self.l_base,
            "l_base_int": self.l_base_int,
            "budget_ceiling": self.budget_ceiling,
            "planned_gpu_entries": self.planned_gpu_entries,
            "lengths": [
                {"layer": l, "head": h, "length": n}
                for (l, h), n in sorted(self.lengths.items())
            ],
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "BudgetPlan":
        try:
            return cls(
                rho=float(payload["rho"]),
                prefill_len=int(payload["prefill_len"]),
                num_heads=int(payload["num_heads"]),
                num_full=int(payload["num_full"]),
                num_comp=int(payload["num_comp"]),
                l_base=float(payload["l_base"]),
                l_base_int=int(payload["l_base_int"]),
                lengths={
                    (int(e["layer"]), int(e["head"])): int(e["length"])
                    for e in payload["lengths"]
                },
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BudgetError(f"malformed budget plan payload: {exc}") from exc


def round_half_up(x: float) -> int:
    """Deterministic tie handling; Python's round() would go to even."""
    return floor(x + 0.5)


def base_length(
    rho: float, num_heads: int, num_full: int, num_comp: int, prefill_len: int
) -> float:
    """Per-head budget left for compressed heads after full heads are funded."""
    if num_comp <= 0:
        raise BudgetError("no compressed heads to allocate")
    l_base = (rho * num_heads - num_full) * prefill_len / num_comp
    if l_base <= 0.0:
        raise InfeasibleBudgetError(
            f"rho={rho} cannot fund {num_full} full-cache heads out of "
            f"{num_heads}; raise rho or reduce full-cache heads"
        )
    return l_base


def largest_remainder(shares, total: int) -> list:
    """Integerize nonnegative shares so the result sums exactly to total."""
    floors = [floor(s) for s in shares]
    leftover = total - sum(floors)
    if leftover < 0 or leftover > len(shares):
        # Float noise put the share sum off by more than rounding explains.
        raise BudgetError(
            f"shares sum to {sum(shares)!r} but {total} units were requested"
        )
    order = sorted(range(len(shares)), key=lambda i: (floors[i] - shares[i], i))
    out = list(floors)
    for i in order[:leftover]:
        out[i] += 1
    return out


def allocate(
    stabilities: dict,
    l_base: float,
    config: BudgetConfig,
    *,
    prefill_len: int,
    num_full: int,
) -> BudgetPlan:
    """Split the compressed-head budget inversely to stability.

    stabilities maps each compressed head to its stability score. The total
    handed out is round_half_up(num_comp * l_base) before clamping.
    """
    if not stabilities:
        raise BudgetError("no compressed heads to allocate")
    heads = sorted(stabilities)
    for head_id in heads:
        s = stabilities[head_id]
        if not 0.0 <= s <= 1.0:
            raise BudgetError(f"stability of {head_id} out of range: {s}")
    num_comp = len(heads)
    budget_total = round_half_up(num_comp * l_base)
    weights = [1.0 / (stabilities[h] + config.epsilon) for h in heads]
    total_w = sum(weights)
    shares = [budget_total * w / total_w for w in weights]

    low = [i for i, s in enumerate(shares) if s < config.min_length]
    high = [i for i, s in enumerate(shares) if s > prefill_len]
    if low or high:
        # One redistribution pass: clamp the outliers, re-split the remainder
        # over the rest by the same weights, then clamp stragglers in place.
        fixed = {i: config.min_length for i in low}
        fixed.update({i: prefill_len for i in high})
        free = [i for i in range(num_comp) if i not in fixed]
        remaining = max(0, budget_total - sum(fixed.values()))
        if free:
            free_w = sum(weights[i] for i in free)
            free_shares = [remaining * weights[i] / free_w for i in free]
            if config.rounding == "largest_remainder":
                free_ints = largest_remainder(free_shares, remaining)
            else:
                free_ints = [floor(s) for s in free_shares]
            ints = [0] * num_comp
            for i, v in fixed.items():
                ints[i] = v
            for i, v in zip(free, free_ints):
                ints[i] = min(max(v, config.min_length), prefill_len)
        else:
            ints = [fixed[i] for i in range(num_comp)]
    elif config.rounding == "largest_remainder":
        ints = largest_remainder(shares, budget_total)
    else:
        ints = [floor(s) for s in shares]

    lengths = {h: int(n) for h, n in zip(heads, ints)}
    return BudgetPlan(
        rho=config.rho,
        prefill_len=prefill_len,
        num_heads=num_full + num_comp,
        num_full=num_full,
        num_comp=num_comp,
        l_base=l_base,
        l_base_int=round_half_up(l_base),
        lengths=lengths,
    )


def plan_budget(
    taxonomy: TaxonomyResult,
    config: BudgetConfig,
    prefill_len: int,
    stabilities: Optional[dict] = None,
) -> BudgetPlan:
    """Budget plan for a taxonomy: full heads funded first, rest split.

    Stabilities default to the profiled scores stored in the taxonomy.
    """
    full = taxonomy.full_heads()
    comp = taxonomy.compressed_heads()
    num_heads = len(taxonomy.heads)
    l_base = base_length(config.rho, num_heads, len(full), len(comp), prefill_len)
    if stabilities is None:
        stabilities = {h: taxonomy.heads[h].s_stable for h in comp}
    else:
        if set(stabilities) != set(comp):
            raise BudgetError("stability overrides must cover the compressed heads")
    return allocate(
        stabilities, l_base, config, prefill_len=prefill_len, num_full=len(full)
    )
