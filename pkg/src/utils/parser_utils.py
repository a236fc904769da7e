from typing import Any, Callable, Iterable, Mapping

import pandas as pd


def parse_labels(text: str) -> tuple[int, ...]:
    """'3;7' -> (3, 7). Order kept, duplicates dropped."""
    parts = [p.strip() for p in text.split(";") if p.strip()]
    if not parts:
        raise ValueError("empty label list")
    labels = []
    for part in parts:
        if not part.lstrip("-").isdigit():
            raise ValueError(f"label '{part}' is not an integer class id")
        if int(part) not in labels:
            labels.append(int(part))
    return tuple(labels)


def format_labels(labels: Iterable[int]) -> str:
    return ";".join(str(label) for label in labels)


def _parse_list(text: str, convert: Callable[[str], Any]) -> list:
    return [convert(item.strip()) for item in text.split(",") if item.strip()]


def parse_int_list(text: str) -> list[int]:
    return _parse_list(text, int)


def parse_float_list(text: str) -> list[float]:
    return _parse_list(text, float)


def parse_config_info(config: Mapping[str, Any], title: str = "Resolved config") -> str:
    return f"{title}:\n" + "\n".join(f"{k}: {v}" for (k, v) in sorted(config.items()))


def format_table(frame: pd.DataFrame, float_digits: int = 4) -> str:
    """Aligned text rendering of a results table"""
    if frame.empty:
        return "(no rows)"
    return frame.to_string(index=False, float_format=lambda v: f"{v:.{float_digits}f}", na_rep="-")
