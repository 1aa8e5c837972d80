"""
Report Tracker - Collects evaluation tables and writes them as JSON and CSV
"""
import json
import os
from datetime import datetime
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd
from loguru import logger

from config import RunConfig, config_hash
from evalharness import REPORT_COLUMNS, MetricReport


class ReportTracker:
    """
    Tracks evaluation results per suite

    Features:
    - One table per suite (density, cross, upperbody, components, quality)
    - Column names shared with the published tables
    - JSON export stamped with the config hash and seed
    - Text summary of the headline columns
    """

    def __init__(self, cfg: RunConfig, out_dir: str, stamp_time: bool = False):
        self.cfg = cfg
        self.out_dir = out_dir
        # off by default: same seed and config give byte-identical reports
        self.stamp_time = stamp_time
        self.config_hash = config_hash(cfg)
        self.suites: Dict[str, List[MetricReport]] = {}
        self.notes: Dict[str, Dict[str, Any]] = {}

        os.makedirs(out_dir, exist_ok=True)

        logger.info(f"✓ Report Tracker initialized (out: {out_dir}, config {self.config_hash[:12]})")

    def add_reports(self, suite: str, reports: List[MetricReport], notes: Optional[Dict[str, Any]] = None):
        self.suites.setdefault(suite, []).extend(reports)
        if notes:
            self.notes.setdefault(suite, {}).update(notes)

    def get_reports_df(self, suite: str) -> pd.DataFrame:
        """Suite table, one row per report"""
        if suite not in self.suites:
            raise KeyError(f"no reports recorded for suite '{suite}'")
        return pd.DataFrame([r.to_row() for r in self.suites[suite]])

    def export_to_dict(self, suite: str) -> Dict[str, Any]:
        data = {
            'suite': suite,
            'seed': self.cfg.seed,
            'config_hash': self.config_hash,
            'notes': self.notes.get(suite, {}),
            'rows': self.get_reports_df(suite).to_dict(orient='records'),
        }
        if self.stamp_time:
            data['created'] = datetime.utcnow().isoformat()
        return data

    def save(self, suite: str) -> Tuple[str, str]:
        """Write <suite>.json and <suite>.csv"""
        json_path = os.path.join(self.out_dir, f'{suite}.json')
        csv_path = os.path.join(self.out_dir, f'{suite}.csv')
        with open(json_path, 'w') as f:
            json.dump(self.export_to_dict(suite), f, indent=2, default=str)
        self.get_reports_df(suite).to_csv(csv_path, index=False)
        logger.success(f"✅ Saved {suite} report: {json_path}")
        return json_path, csv_path

    def get_summary(self, suite: str) -> str:
        df = self.get_reports_df(suite)
        lines = [f"{'=' * 60}", f"{suite.upper()} ({len(df)} rows, config {self.config_hash[:12]})", f"{'=' * 60}"]
        columns = ['Name'] + [c for c in REPORT_COLUMNS if c in df.columns]
        lines.append(df[columns].to_string(index=False, float_format=lambda v: f'{v:.4f}'))
        return '\n'.join(lines)

    def print_summary(self, suite: str):
        logger.info('\n' + self.get_summary(suite))
