"""Token pricing, cache savings, and cache-marker placement.

Price sheets are per-million-token rates. Billing always uses
backend-reported usage; the characters/4 token heuristic is only ever used
to place cache markers along the grid.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import yaml

from .gateway import Message, Usage, estimate_tokens


class AccountingError(Exception):
    pass


@dataclass(frozen=True)
class PriceSheet:
    """Per-million-token prices in currency units (USD in the shipped sheets)."""

    model_id: str
    input: float
    output: float
    cache_read: float = 0.0
    cache_write: float = 0.0
    cache_supported: bool = False

    def __post_init__(self) -> None:
        for name in ("input", "output", "cache_read", "cache_write"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} rate must be >= 0")


#: The three default sheets (per-million USD).
DEFAULT_SHEETS: dict[str, PriceSheet] = {
    s.model_id: s
    for s in (
        PriceSheet("claude-3.7-sonnet", input=3.0, output=15.0,
                   cache_read=0.3, cache_write=3.75, cache_supported=True),
        PriceSheet("mistral-large-3", input=0.5, output=1.5),
        PriceSheet("llama-3.3-70b", input=0.15, output=0.6),
    )
}


def load_price_sheets(path: str | os.PathLike[str]) -> dict[str, PriceSheet]:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    sheets: dict[str, PriceSheet] = {}
    for model_id, raw in (data.get("models") or {}).items():
        sheets[model_id] = PriceSheet(
            model_id=model_id,
            input=float(raw["input"]),
            output=float(raw["output"]),
            cache_read=float(raw.get("cache_read", 0.0)),
            cache_write=float(raw.get("cache_write", 0.0)),
            cache_supported=bool(raw.get("cache_supported", False)),
        )
    if not sheets:
        raise AccountingError(f"no price sheets found in {path}")
    return sheets


@dataclass(frozen=True)
class CostBreakdown:
    input_cost: float
    output_cost: float
    cache_read_cost: float
    cache_write_cost: float

    @property
    def total(self) -> float:
        return self.input_cost + self.output_cost + self.cache_read_cost + self.cache_write_cost

    def to_dict(self) -> dict[str, float]:
        return {
            "input_cost": self.input_cost,
            "output_cost": self.output_cost,
            "cache_read_cost": self.cache_read_cost,
            "cache_write_cost": self.cache_write_cost,
            "total": self.total,
        }


def cost(usage: Usage, sheet: PriceSheet) -> CostBreakdown:
    """Price a usage record: each component is tokens x rate / 1e6."""
    if not sheet.cache_supported and (usage.cache_read_tokens or usage.cache_write_tokens):
        raise AccountingError(
            f"usage reports cache tokens but sheet {sheet.model_id!r} has no cache support")
    return CostBreakdown(
        input_cost=usage.input_tokens * sheet.input / 1e6,
        output_cost=usage.output_tokens * sheet.output / 1e6,
        cache_read_cost=usage.cache_read_tokens * sheet.cache_read / 1e6,
        cache_write_cost=usage.cache_write_tokens * sheet.cache_write / 1e6,
    )


def cache_savings(usage: Usage, sheet: PriceSheet) -> float:
    """Fraction saved versus the counterfactual where cache_read and
    cache_write tokens had been billed at the fresh input rate."""
    if not sheet.cache_supported:
        raise AccountingError(f"sheet {sheet.model_id!r} has no cache support")
    actual = cost(usage, sheet).total
    fresh_inputs = usage.input_tokens + usage.cache_read_tokens + usage.cache_write_tokens
    counterfactual = fresh_inputs * sheet.input / 1e6 + usage.output_tokens * sheet.output / 1e6
    if counterfactual == 0:
        return 0.0
    return 1.0 - actual / counterfactual


def mark_cache_points(messages: Sequence[Message], grid_step: int) -> list[Message]:
    """Place cache markers along a regular grid of estimated tokens.

    A message boundary is marked once at least ``grid_step`` estimated tokens
    have accumulated since the previous marker (or the start). Markers are
    monotone prefixes; existing markers are discarded and recomputed.
    """
    if grid_step < 1:
        raise ValueError("grid_step must be >= 1")
    marked: list[Message] = []
    since_mark = 0
    for msg in messages:
        since_mark += estimate_tokens(msg.content)
        if since_mark >= grid_step:
            marked.append(Message(msg.role, msg.content, cache=True))
            since_mark = 0
        else:
            marked.append(Message(msg.role, msg.content, cache=False))
    return marked
