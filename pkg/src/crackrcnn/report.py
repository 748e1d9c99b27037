"""Fixed-width result tables in the layout of the comparison tables."""
from __future__ import annotations

from typing import Iterable, List, Sequence, Tuple

from .metrics import ApReport
from .pipeline import EvalReport

__all__ = ["format_ap_table", "format_prf_table", "format_report", "compare_report"]

AP_FIELDS = (("AP", "ap"), ("AP50", "ap50"), ("AP75", "ap75"), ("APS", "ap_s"), ("APM", "ap_m"), ("APL", "ap_l"))
PRF_FIELDS = (("Accuracy", "accuracy"), ("Recall", "recall"), ("Precision", "precision"))


def _num(v) -> str:
    return "-" if v is None else f"{v:.1f}"


def _pct(v) -> str:
    return "-" if v is None else f"{100 * v:.1f}%"


def _table(header: Sequence[str], rows: Sequence[Sequence[str]], title: str = "") -> str:
    name_w = max([len(header[0])] + [len(r[0]) for r in rows])
    col_w = [max([len(header[i])] + [len(r[i]) for r in rows]) for i in range(1, len(header))]
    def line(cells):
        parts = [cells[0].ljust(name_w)] + [c.rjust(w) for c, w in zip(cells[1:], col_w)]
        return "  ".join(parts).rstrip()
    out = [title] if title else []
    out.append(line(header))
    out.append("-" * len(line(header)))
    out.extend(line(r) for r in rows)
    return "\n".join(out) + "\n"


def format_ap_table(rows: Iterable[Tuple[str, ApReport]], title: str = "") -> str:
    body = [[name] + [_num(getattr(rep, attr)) for _, attr in AP_FIELDS] for name, rep in rows]
    return _table(["Methods"] + [h for h, _ in AP_FIELDS], body, title)


def format_prf_table(rows: Iterable[Tuple[str, dict]], title: str = "") -> str:
    body = [[name] + [_pct(rates.get(key)) for _, key in PRF_FIELDS] for name, rates in rows]
    return _table(["Methods"] + [h for h, _ in PRF_FIELDS], body, title)


def format_report(rep: EvalReport) -> str:
    parts = []
    for variant in ("box", "mask"):
        ap = getattr(rep, variant)
        if ap is not None:
            parts.append(format_ap_table([(rep.method, ap)], f"{variant} AP ({rep.n_images} images)"))
    parts.append(
        format_prf_table(
            [(rep.method, rep.rates)],
            f"image level, score >= {rep.score_threshold:g} "
            f"(TP={rep.counts.tp} FP={rep.counts.fp} FN={rep.counts.fn} TN={rep.counts.tn})",
        )
    )
    return "\n".join(parts)


def _unique_names(reports: Sequence[Tuple[str, EvalReport]]) -> List[str]:
    names = [label or rep.method for label, rep in reports]
    seen = {}
    out = []
    for n in names:
        seen[n] = seen.get(n, 0) + 1
        out.append(n if seen[n] == 1 else f"{n} #{seen[n]}")
    return out


def compare_report(reports: Sequence) -> str:
    """One row per evaluation: AP columns plus accuracy/recall/precision.

    ``reports`` holds EvalReport objects or ``(label, EvalReport)`` pairs.
    Evaluations over different datasets are refused.
    """
    pairs = [r if isinstance(r, tuple) else ("", r) for r in reports]
    if not pairs:
        raise ValueError("compare_report needs at least one evaluation")
    digests = sorted({rep.dataset_digest for _, rep in pairs})
    if len(digests) > 1:
        raise ValueError(f"refusing to compare evaluations over different datasets: {', '.join(digests)}")
    names = _unique_names(pairs)
    header = ["Methods"] + [h for h, _ in AP_FIELDS] + [h for h, _ in PRF_FIELDS]
    parts = []
    for variant in ("box", "mask"):
        rows = []
        for name, (_, rep) in zip(names, pairs):
            ap = getattr(rep, variant)
            cells = [_num(getattr(ap, attr) if ap else None) for _, attr in AP_FIELDS]
            rows.append([name] + cells + [_pct(rep.rates.get(k)) for _, k in PRF_FIELDS])
        parts.append(_table(header, rows, f"{variant} AP, dataset {digests[0]}"))
    return "\n".join(parts)
