import json
import os
from typing import Dict, Iterable, List

import pandas as pd
from loguru import logger
from pydantic import ValidationError

from coalflow.core.exceptions import ConfigError
from coalflow.models.estimate_models import ReplicaRecord, StudyReport

REPORT_FILE = "report.json"
TABLE_FILE = "report.csv"
RAW_FILE = "raw.jsonl"


class ReportStore:
    @staticmethod
    def dumps(report: StudyReport) -> str:
        """Canonical JSON: sorted keys, so equal reports are equal bytes"""
        return json.dumps(report.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"

    @staticmethod
    def write_report(report: StudyReport, out_dir: str) -> Dict[str, str]:
        """Write report.json and its CSV mirror; returns the paths written"""
        try:
            os.makedirs(out_dir, exist_ok=True)
            paths = {"report": os.path.join(out_dir, REPORT_FILE), "table": os.path.join(out_dir, TABLE_FILE)}
            with open(paths["report"], "w", encoding="utf-8") as f:
                f.write(ReportStore.dumps(report))
            ReportStore.table_frame(report).to_csv(paths["table"], index=False, float_format="%.17g")
            logger.info(f"Report written to {paths['report']}")
            return paths
        except OSError as e:
            logger.error(f"Error writing report to {out_dir}: {e}")
            raise

    @staticmethod
    def write_raw(records: Iterable[ReplicaRecord], out_dir: str) -> str:
        """One JSON line per replica, in replica order"""
        path = os.path.join(out_dir, RAW_FILE)
        os.makedirs(out_dir, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(record.model_dump(mode="json"), sort_keys=True) + "\n")
        return path

    @staticmethod
    def read_raw(path: str) -> List[ReplicaRecord]:
        with open(path, "r", encoding="utf-8") as f:
            return [ReplicaRecord.model_validate_json(line) for line in f if line.strip()]

    @staticmethod
    def read_report(path: str) -> StudyReport:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
            return StudyReport.model_validate(data)
        except OSError as e:
            raise ConfigError(f"cannot read report: {e}", field=str(path)) from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed report JSON at line {e.lineno}: {e.msg}", field=str(path)) from e
        except ValidationError as e:
            first = e.errors()[0]
            field = ".".join(str(p) for p in first.get("loc", ())) or str(path)
            raise ConfigError(first.get("msg", "malformed report"), field=field) from e

    @staticmethod
    def table_frame(report: StudyReport) -> pd.DataFrame:
        rows = report.table
        if not rows:
            columns = [report.parameter or "rung", "p_hat", "stderr"]
            return pd.DataFrame(columns=columns)
        return pd.DataFrame(rows)


report_store = ReportStore()
