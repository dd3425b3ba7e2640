"""
报表生成模块
把实验结果、故障网格与带宽表写成 CSV、JSON 和 Excel
"""
import json
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Alignment, Font, PatternFill
from openpyxl.utils.dataframe import dataframe_to_rows

from src.harness.experiments import ExperimentReport

logger = logging.getLogger(__name__)

HEADER_COLOR = "366092"


class ReportGenerator:
    """报表生成器"""

    def __init__(self, reports_dir: str = "output"):
        self.reports_dir = reports_dir
        self._ensure_directories()

    def _ensure_directories(self):
        """确保报表目录存在"""
        os.makedirs(self.reports_dir, exist_ok=True)

    def _path(self, name: str) -> Path:
        return Path(self.reports_dir) / name

    def write_experiment(self, report: ExperimentReport, name: str = "report") -> Dict[str, Path]:
        """
        写出单次实验报告

        Args:
            report: 实验报告
            name: 文件名前缀

        Returns:
            Dict[str, Path]: json / csv / curve 文件路径
        """
        paths = {"json": self._path(f"{name}.json"), "csv": self._path(f"{name}.csv")}
        with open(paths["json"], "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2, ensure_ascii=False)
        pd.DataFrame([report.summary()]).to_csv(paths["csv"], index=False)
        if report.loss_curve:
            paths["curve"] = self._path(f"{name}_curve.csv")
            pd.DataFrame(report.loss_curve, columns=["t", "time", "loss"]).to_csv(paths["curve"], index=False)
        logger.info(f"实验报告已生成: {paths['json']}")
        return paths

    def compare(self, reports: Sequence[ExperimentReport], name: str = "comparison") -> Path:
        """多个实验并排比较（例如 dp 与 decoupled）"""
        frame = pd.DataFrame([r.summary() for r in reports])
        path = self._path(f"{name}.csv")
        frame.to_csv(path, index=False)
        logger.info(f"对比报告已生成: {path}")
        return path

    def write_table(self, frame: pd.DataFrame, name: str) -> Path:
        path = self._path(f"{name}.csv")
        frame.to_csv(path, index=False)
        logger.info(f"表格已生成: {path} ({len(frame)} 行)")
        return path

    def write_workbook(self, sheets: Dict[str, pd.DataFrame], name: str = "report",
                       title: Optional[str] = None) -> Path:
        """
        把若干表格写成一个 Excel 工作簿，每张表一页

        Args:
            sheets: 页名 → 表格
            name: 文件名前缀
            title: 首页标题

        Returns:
            Path: xlsx 文件路径
        """
        wb = Workbook()
        wb.remove(wb.active)

        header_font = Font(bold=True, color="FFFFFF")
        header_fill = PatternFill(start_color=HEADER_COLOR, end_color=HEADER_COLOR, fill_type="solid")
        header_alignment = Alignment(horizontal="center", vertical="center")

        for sheet_name, frame in sheets.items():
            ws = wb.create_sheet(sheet_name[:31])
            start = 1
            if title:
                ws["A1"] = f"{title} - {datetime.now().strftime('%Y-%m-%d %H:%M')}"
                ws["A1"].font = Font(bold=True, size=14)
                start = 3
            for i, row in enumerate(dataframe_to_rows(frame, index=False, header=True)):
                for j, value in enumerate(row, 1):
                    ws.cell(row=start + i, column=j, value=value)
            for cell in ws[start]:
                cell.font = header_font
                cell.fill = header_fill
                cell.alignment = header_alignment
            for column in ws.columns:
                width = max(len(str(c.value)) if c.value is not None else 0 for c in column[start - 1:])
                ws.column_dimensions[column[0].column_letter].width = min(max(10, width + 2), 40)

        path = self._path(f"{name}.xlsx")
        wb.save(path)
        logger.info(f"Excel 报表已生成: {path}")
        return path


def save_report(report: ExperimentReport, out_dir: str, name: str = "report") -> Dict[str, Path]:
    """便捷函数：写出单次实验报告"""
    return ReportGenerator(out_dir).write_experiment(report, name)


def save_table(frame: pd.DataFrame, out_dir: str, name: str) -> Path:
    return ReportGenerator(out_dir).write_table(frame, name)


def report_frame(reports: List[ExperimentReport]) -> pd.DataFrame:
    return pd.DataFrame([r.summary() for r in reports])
