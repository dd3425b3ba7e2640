# 解耦分片训练桌面实现 - 实验模块
from src.harness.tasks import (
    TaskSpec, Dataset, TaskWorkload, build_model, make_dataset, make_shards, init_params,
    loss_and_grad, evaluate,
)
from src.harness.experiments import (
    ReferenceResult, ExperimentReport, LossTracker,
    run_dp_reference, run_streaming_reference, run_decoupled, run_experiment,
)
from src.harness.report_generator import ReportGenerator, save_report, save_table, report_frame
