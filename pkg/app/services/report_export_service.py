"""
Report Export Service
JSON reports for machines, CSV tables for plotting
"""
from pathlib import Path
from typing import List, Optional, Sequence, Union
import logging

import pandas as pd
from pydantic import BaseModel

from app.schemas import MetricsReport, OverlapReportFile, TrajectoryMetricsReport
from app.services.engine import DecodeMetrics, TrajectoryResult, compute_metrics

logger = logging.getLogger(__name__)


class ReportExportService:
    """Builds and writes decode, overlap and probe reports"""

    @staticmethod
    def _round(value: float) -> float:
        return round(float(value), 6)

    @staticmethod
    def trajectory_row(result: TrajectoryResult) -> TrajectoryMetricsReport:
        m = result.metrics
        r = ReportExportService._round
        return TrajectoryMetricsReport(
            problem=result.problem,
            trajectory=result.trajectory,
            tokens=m.tokens,
            rounds=m.rounds,
            accept_len_mean=r(m.accept_len_mean),
            target_positions=m.target_positions,
            target_positions_per_token=r(m.target_positions_per_token),
            calls_per_token=r(m.calls_per_token),
            wall_ms=r(m.wall_seconds * 1000.0),
            throughput_tps=r(m.throughput_tps),
        )

    @staticmethod
    def build_metrics_report(
        results: Sequence[TrajectoryResult],
        mode: str,
        topology: str,
        store_scope: str,
    ) -> MetricsReport:
        """
        Aggregate over every round of every trajectory, plus mean accept
        length by trajectory index across problems (the scaling curve).
        """
        traces = [t for res in results for t in res.traces]
        wall = sum(res.metrics.wall_seconds for res in results)
        total = compute_metrics(traces, wall) if traces else DecodeMetrics.empty()
        r = ReportExportService._round

        by_index: List[float] = []
        n_index = max((res.trajectory for res in results), default=-1) + 1
        for i in range(n_index):
            values = [res.metrics.accept_len_mean for res in results if res.trajectory == i and res.traces]
            by_index.append(r(sum(values) / len(values)) if values else 0.0)

        return MetricsReport(
            mode=mode,
            topology=topology,
            store_scope=store_scope,
            tokens=total.tokens,
            rounds=total.rounds,
            accept_len_mean=r(total.accept_len_mean),
            target_positions=total.target_positions,
            target_positions_per_token=r(total.target_positions_per_token),
            calls_per_token=r(total.calls_per_token),
            wall_ms=r(total.wall_seconds * 1000.0),
            throughput_tps=r(total.throughput_tps),
            per_trajectory=[ReportExportService.trajectory_row(res) for res in results],
            per_trajectory_index_accept_len=by_index,
        )

    @staticmethod
    def write_json(report: BaseModel, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.model_dump_json(indent=2) + "\n")
        logger.info(f"Wrote {path}")
        return path

    @staticmethod
    def write_metrics_csv(report: MetricsReport, path: Union[str, Path]) -> Path:
        """One row per trajectory"""
        path = Path(path)
        frame = pd.DataFrame([row.model_dump() for row in report.per_trajectory], columns=list(TrajectoryMetricsReport.model_fields))
        frame.to_csv(path, index=False)
        logger.info(f"Wrote {path}")
        return path

    @staticmethod
    def write_overlap_csv(report: OverlapReportFile, path: Union[str, Path]) -> Path:
        """Columns k, n, overlap_pct first so the file plots as overlap-vs-k curves"""
        path = Path(path)
        columns = ["k", "n", "overlap_pct", "distinct_overlap_pct", "occurrences", "repeated_occurrences"]
        pd.DataFrame([row.model_dump() for row in report.rows], columns=columns).to_csv(path, index=False)
        logger.info(f"Wrote {path}")
        return path

    @staticmethod
    def summary_lines(report: MetricsReport, baseline: Optional[MetricsReport] = None) -> List[str]:
        """Human-readable summary for stdout"""
        lines = [
            f"mode={report.mode} topology={report.topology} scope={report.store_scope}",
            f"tokens={report.tokens} rounds={report.rounds} A={report.accept_len_mean:.3f}",
            f"target positions/token={report.target_positions_per_token:.3f} calls/token={report.calls_per_token:.3f}",
        ]
        if report.per_trajectory_index_accept_len:
            curve = " ".join(f"{a:.2f}" for a in report.per_trajectory_index_accept_len)
            lines.append(f"A by trajectory index: {curve}")
        if baseline is not None:
            lines.append(f"plain decode: tokens={baseline.tokens} calls/token={baseline.calls_per_token:.3f}")
        return lines
