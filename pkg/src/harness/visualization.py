"""
实验可视化
损失曲线与 goodput 热力图
"""
import logging
import os
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from src.harness.experiments import ExperimentReport

# 设置中文字体
plt.rcParams['font.sans-serif'] = ['SimHei', 'Arial Unicode MS', 'DejaVu Sans']
plt.rcParams['axes.unicode_minus'] = False

logger = logging.getLogger(__name__)


class ExperimentVisualizer:
    """实验图表"""

    def __init__(self, charts_dir: str = "output"):
        self.charts_dir = charts_dir
        os.makedirs(self.charts_dir, exist_ok=True)
        self.colors = {
            'decoupled': '#007bff',
            'dp': '#dc3545',
            'replay': '#28a745',
            'other': '#6c757d',
        }

    def loss_curves(self, reports: Sequence[ExperimentReport], name: str = "loss_curve",
                    labels: Optional[Sequence[str]] = None) -> str:
        """
        全局模型损失随同步步变化

        Args:
            reports: 带 loss_curve 的实验报告
            name: 文件名前缀
            labels: 图例，默认用 method/M/K

        Returns:
            str: PNG 路径
        """
        fig, ax = plt.subplots(figsize=(10, 6))
        for i, report in enumerate(reports):
            if not report.loss_curve:
                continue
            steps = [point[0] for point in report.loss_curve]
            losses = [point[2] for point in report.loss_curve]
            label = labels[i] if labels else f"{report.method} M={report.num_learners} K={report.quorum}"
            ax.plot(steps, losses, linewidth=2, label=label,
                    color=self.colors.get(report.method, self.colors['other']) if len(reports) <= 2 else None)
        ax.set_title('全局模型损失')
        ax.set_xlabel('同步步')
        ax.set_ylabel('损失')
        ax.grid(True, alpha=0.3)
        ax.legend()
        plt.tight_layout()

        path = os.path.join(self.charts_dir, f"{name}.png")
        plt.savefig(path, dpi=150, bbox_inches='tight')
        plt.close(fig)
        logger.info(f"损失曲线已保存: {path}")
        return path

    def goodput_heatmap(self, table: pd.DataFrame, name: str = "goodput", value: str = "goodput") -> str:
        """故障网格热力图（行 M，列芯片数），只画弹性行"""
        data = table[table["elastic"]] if "elastic" in table else table
        grid = data.pivot_table(index="M", columns="n_chip", values=value, aggfunc="mean")
        fig, ax = plt.subplots(figsize=(10, 6))
        image = ax.imshow(grid.values * 100, cmap='RdYlGn', vmin=0, vmax=100, aspect='auto')
        ax.set_xticks(np.arange(grid.shape[1]))
        ax.set_xticklabels([f"{int(n / 1000)}k" for n in grid.columns])
        ax.set_yticks(np.arange(grid.shape[0]))
        ax.set_yticklabels([str(m) for m in grid.index])
        for i in range(grid.shape[0]):
            for j in range(grid.shape[1]):
                ax.text(j, i, f"{grid.values[i, j] * 100:.0f}", ha='center', va='center', fontsize=9)
        ax.set_title(f'{value} (%)')
        ax.set_xlabel('芯片数')
        ax.set_ylabel('学习者数 M')
        fig.colorbar(image, ax=ax)
        plt.tight_layout()

        path = os.path.join(self.charts_dir, f"{name}.png")
        plt.savefig(path, dpi=150, bbox_inches='tight')
        plt.close(fig)
        logger.info(f"{value} 热力图已保存: {path}")
        return path

    def admitted_histogram(self, reports: Dict[str, ExperimentReport], name: str = "admitted") -> str:
        """每次同步接纳学习者数的分布（例如有无宽限窗口对比）"""
        fig, ax = plt.subplots(figsize=(8, 5))
        for label, report in reports.items():
            if report.admitted:
                bins = np.arange(0.5, max(report.admitted) + 1.5)
                ax.hist(report.admitted, bins=bins, alpha=0.5, label=f"{label} (均值 {report.mean_admitted:.2f})")
        ax.set_title('每次同步接纳的学习者数')
        ax.set_xlabel('学习者数')
        ax.set_ylabel('次数')
        ax.legend()
        ax.grid(True, alpha=0.3)
        plt.tight_layout()

        path = os.path.join(self.charts_dir, f"{name}.png")
        plt.savefig(path, dpi=150, bbox_inches='tight')
        plt.close(fig)
        logger.info(f"接纳分布图已保存: {path}")
        return path
