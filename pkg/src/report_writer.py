"""
Writes run, sweep and training results to disk in a byte-stable form.
"""
import csv
import json
import logging
from decimal import Decimal, ROUND_HALF_UP
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

from .grouping import TrainingResult
from .models import MetricsReport, OutputFormat, SweepRow
from .phy_channel import NO_TX

logger = logging.getLogger("muvis")

FLOAT_PLACES = Decimal("0.000001")

EPOCH_COLUMNS = [
    "epoch",
    "partition_canonical",
    "user_id",
    "mode",
    "eff_snr_db",
    "mcs",
    "goodput_mbps",
    "csi_correlation",
]
QOE_COLUMNS = [
    "user_id",
    "segments",
    "loss_rate",
    "underflow_rate",
    "switch_rate",
    "mean_bitrate_mbps",
]
SEGMENT_COLUMNS = [
    "user_id",
    "segment",
    "bitrate_idx",
    "bitrate_mbps",
    "outcome",
    "switched",
    "underflow",
]
SWEEP_COLUMNS = ["axis", "level", "seed", "arm", "mean_throughput_mbps"]


def format_float(value: float) -> str:
    """Six decimals, rounded from the shortest decimal form of the value; never "-0.000000" """
    text = str(Decimal(repr(float(value))).quantize(FLOAT_PLACES, rounding=ROUND_HALF_UP))
    if text.startswith("-") and Decimal(text) == 0:
        text = text[1:]
    return text


def format_mcs(mcs: int) -> str:
    return "NO_TX" if mcs == NO_TX else str(mcs)


def _flag(value: bool) -> str:
    return "1" if value else "0"


def epoch_rows(report: MetricsReport) -> List[Dict[str, str]]:
    rows = []
    for record in sorted(report.epochs, key=lambda e: e.epoch):
        for user in sorted(record.users, key=lambda u: u.user_id):
            rows.append({
                "epoch": str(record.epoch),
                "partition_canonical": record.partition,
                "user_id": str(user.user_id),
                "mode": user.mode.value,
                "eff_snr_db": format_float(user.eff_snr_db),
                "mcs": format_mcs(user.mcs),
                "goodput_mbps": format_float(user.goodput_mbps),
                "csi_correlation": format_float(user.csi_correlation),
            })
    return rows


def qoe_rows(report: MetricsReport) -> List[Dict[str, str]]:
    return [
        {
            "user_id": str(q.user_id),
            "segments": str(q.segments),
            "loss_rate": format_float(q.loss_rate),
            "underflow_rate": format_float(q.underflow_rate),
            "switch_rate": format_float(q.switch_rate),
            "mean_bitrate_mbps": format_float(q.mean_bitrate_mbps),
        }
        for q in sorted(report.qoe, key=lambda q: q.user_id)
    ]


def segment_rows(report: MetricsReport) -> List[Dict[str, str]]:
    return [
        {
            "user_id": str(s.user_id),
            "segment": str(s.segment),
            "bitrate_idx": str(s.bitrate_idx),
            "bitrate_mbps": format_float(s.bitrate_mbps),
            "outcome": s.outcome,
            "switched": _flag(s.switched),
            "underflow": _flag(s.underflow),
        }
        for s in sorted(report.segments, key=lambda s: (s.user_id, s.segment))
    ]


def summary_document(report: MetricsReport) -> Dict[str, Any]:
    aggregates = [e.aggregate_mbps for e in report.epochs]
    return {
        "seed": report.seed,
        "config_digest": report.config_digest,
        "policy": report.policy.value,
        "epochs": len(report.epochs),
        "mean_user_throughput_mbps": format_float(report.mean_user_throughput_mbps),
        "mean_aggregate_mbps": format_float(sum(aggregates) / len(aggregates) if aggregates else 0.0),
        "users_without_segments": sorted(q.user_id for q in report.qoe if q.no_segments),
        "metadata": dict(sorted(report.metadata.items())),
    }


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[Dict[str, str]]) -> Path:
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def _write_json(path: Path, document: Any) -> Path:
    with path.open("w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(document, sort_keys=True, indent=2) + "\n")
    return path


def emit_report(
    report: MetricsReport,
    fmt: Union[OutputFormat, str],
    out_dir: Union[str, Path],
) -> List[Path]:
    """
    Write a run's results into out_dir

    csv: epochs.csv, qoe.csv, segments.csv; json: epochs.json, qoe.json,
    segments.json. summary.json is written in both cases. Floats carry six
    decimals and rows are sorted by (epoch, user_id).

    Returns:
        Paths of the files written
    """
    fmt = OutputFormat(fmt)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    tables = (
        ("epochs", EPOCH_COLUMNS, epoch_rows(report)),
        ("qoe", QOE_COLUMNS, qoe_rows(report)),
        ("segments", SEGMENT_COLUMNS, segment_rows(report)),
    )
    written = []
    for name, columns, rows in tables:
        if fmt == OutputFormat.CSV:
            written.append(_write_csv(out / f"{name}.csv", columns, rows))
        else:
            written.append(_write_json(out / f"{name}.json", rows))
    written.append(_write_json(out / "summary.json", summary_document(report)))
    logger.info(f"Wrote {len(written)} files to {out}")
    return written


def emit_sweep(rows: Sequence[SweepRow], out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rendered = [
        {
            "axis": r.axis.value,
            "level": str(r.level),
            "seed": str(r.seed),
            "arm": r.arm,
            "mean_throughput_mbps": format_float(r.mean_throughput_mbps),
        }
        for r in rows
    ]
    path = _write_csv(out / "sweep.csv", SWEEP_COLUMNS, rendered)
    logger.info(f"Wrote {len(rendered)} sweep rows to {path}")
    return path


def emit_training(result: TrainingResult, out_dir: Union[str, Path]) -> List[Path]:
    """qtable.json plus best_partition.json describing g and the greedy steady state"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    qtable_path = out / "qtable.json"
    with qtable_path.open("w", encoding="utf-8", newline="\n") as f:
        f.write(result.qtable.to_json())
    best_path = _write_json(out / "best_partition.json", {
        "index": result.best_index,
        "partition": result.best_partition.canonical(),
        "reward_mbps": format_float(result.best_reward),
        "greedy_partition": result.greedy_partition.canonical() if result.greedy_partition else None,
    })
    logger.info(f"Wrote Q-table with {len(result.qtable)} states to {qtable_path}")
    return [qtable_path, best_path]
