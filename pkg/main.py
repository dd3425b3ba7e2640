#!/usr/bin/env python3
"""
解耦分片训练桌面实现 - 命令行入口
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

# 添加src目录到Python路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.core.config import ExperimentConfig, ensure_directories, load_config, setup_logging
from src.core.errors import ConfigError, ReplayIntegrityError, SnapshotIntegrityError

logger = logging.getLogger("main")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_REPLAY = 3
EXIT_SNAPSHOT = 4


def _config(args) -> ExperimentConfig:
    """读取配置并应用命令行覆盖"""
    config = load_config(args.config)
    top, runtime = {}, {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.out:
        top["output_dir"] = args.out
    if args.record:
        top["record"] = args.record
    if args.mode:
        runtime["mode"] = args.mode
    if runtime:
        top["runtime"] = runtime
    return config.updated(**top) if top else config


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, ensure_ascii=False)
    return path


def cmd_train(args, config: ExperimentConfig) -> int:
    """训练：method=dp 跑数据并行参考，否则跑完整协议"""
    from src.harness.experiments import run_experiment
    from src.harness.report_generator import ReportGenerator

    kwargs = {}
    if config.runtime.method == "decoupled":
        kwargs["record"] = config.record or None
        kwargs["snapshot_dir"] = config.snapshot.directory
    report = run_experiment(config, **kwargs)
    generator = ReportGenerator(config.output_dir)
    name = f"report_{report.method}"
    generator.write_experiment(report, name)
    if args.excel:
        import pandas as pd
        generator.write_workbook({"summary": pd.DataFrame([report.summary()])}, name, title="实验报告")
    if args.plot:
        from src.harness.visualization import ExperimentVisualizer
        ExperimentVisualizer(config.output_dir).loss_curves([report], f"{name}_loss")
    print(json.dumps(report.summary(), indent=2, ensure_ascii=False))
    return EXIT_OK


def cmd_replay(args, config: ExperimentConfig) -> int:
    """回放磁带并输出各工作者参数校验和"""
    from src.causality.replay import replay
    from src.causality.tape import read_tape
    from src.harness.tasks import TaskWorkload

    tape = read_tape(args.tape)
    result = replay(tape, config, TaskWorkload.from_config(config))
    sums = result.checksums()
    path = _write_json(Path(config.output_dir) / "replay_checksums.json", sums)
    logger.info(f"回放校验和已保存: {path}")
    if args.expect:
        expected = json.loads(Path(args.expect).read_text(encoding="utf-8"))
        expected = expected.get("checksums", expected)
        mismatched = sorted(k for k in expected if sums.get(k) != expected[k])
        if mismatched:
            raise ReplayIntegrityError(f"回放结果与记录不一致: {mismatched}")
        print("回放结果与记录逐位一致")
    print(json.dumps(sums, indent=2))
    return EXIT_OK


def cmd_synth(args, config: ExperimentConfig) -> int:
    """按故障配置生成合成磁带"""
    from src.causality.synth import generate_synthetic_tape

    path = args.tape or os.path.join(config.output_dir, "synthetic_tape.jsonl")
    tape = generate_synthetic_tape(config, path)
    print(f"合成磁带: {path} ({len(tape)} 条事件)")
    return EXIT_OK


def cmd_chaos_table(args, config: ExperimentConfig) -> int:
    """goodput / uptime 网格"""
    from src.chaos.cluster import ChaosConfig
    from src.chaos.simulator import chaos_table
    from src.harness.report_generator import save_table

    base = ChaosConfig.from_settings(config.chaos, 1)
    m_values = [int(x) for x in args.m.split(",")]
    n_values = [int(x) for x in args.n.split(",")]
    table = chaos_table(base, m_values, n_values, steps=args.steps, step_time=config.runtime.step_time,
                        seed=config.seed)
    save_table(table, config.output_dir, "chaos_table")
    if args.plot:
        from src.harness.visualization import ExperimentVisualizer
        ExperimentVisualizer(config.output_dir).goodput_heatmap(table)
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_bw_table(args, config: ExperimentConfig) -> int:
    """带宽需求表"""
    from src.bandwidth.model import bandwidth_table
    from src.harness.report_generator import save_table

    table = bandwidth_table(args.params, args.bits, H=args.H, tau=args.tau, overhead=args.overhead)
    save_table(table, config.output_dir, "bandwidth_table")
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_plan_inspect(args, config: ExperimentConfig) -> int:
    """比较分片策略的最大分片负载"""
    import pandas as pd

    from src.fragmentation.planners import optimal_max_load, plan_from_strategy, plan_loads, plan_to_text
    from src.harness.report_generator import save_table
    from src.harness.tasks import TaskSpec, build_model

    model = build_model(TaskSpec.from_config(config.task))
    P = args.P or config.runtime.fragments
    H = max(P, config.runtime.sync_interval)
    strategies = ["layer", "tensor", "balanced"] if args.strategy == "all" else [args.strategy]
    rows = []
    for strategy in strategies:
        plan = plan_from_strategy(model, strategy, P, H)
        loads = plan_loads(plan, model)
        rows.append({"strategy": strategy, "P": P, "max_load": max(loads), "min_load": min(loads),
                     "total": sum(loads)})
        print(f"# {strategy}")
        print(plan_to_text(plan, model))
    if len(model) <= 14:
        rows.append({"strategy": "optimal", "P": P, "max_load": optimal_max_load([t.size for t in model], P),
                     "min_load": None, "total": sum(t.size for t in model)})
    table = pd.DataFrame(rows)
    save_table(table, config.output_dir, "plan_inspect")
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_ckpt_resume(args, config: ExperimentConfig) -> int:
    """从快照恢复；给定磁带时按磁带回放剩余事件"""
    from src.causality.tape import read_tape
    from src.core.params import checksum
    from src.harness.tasks import TaskWorkload
    from src.resilience.resume import resume
    from src.resilience.snapshot import latest_snapshot

    root = Path(args.dir)
    path = root if (root / "manifest.json").exists() else latest_snapshot(root)
    if path is None:
        raise SnapshotIntegrityError(f"目录 {root} 下没有完整的快照")
    tape = read_tape(args.tape) if args.tape else None
    workload = TaskWorkload.from_config(config)
    result = resume(path, config, workload, tape=tape, snapshot_dir=config.snapshot.directory)
    sums = result.checksums()
    summary = {"snapshot": str(path), "final_step": result.final_step,
               "loss": workload.evaluate(result.theta)["loss"], "checksums": sums,
               "syncer_checksum": checksum(result.theta.values)}
    _write_json(Path(config.output_dir) / "resume_report.json", summary)
    print(json.dumps(summary, indent=2, ensure_ascii=False))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddl", description="解耦分片训练桌面实现")
    parser.add_argument("--config", help="key=value 或 YAML 配置文件")
    parser.add_argument("--seed", type=int, help="覆盖实验种子")
    parser.add_argument("--record", help="磁带输出路径")
    parser.add_argument("--mode", choices=["det", "live"], help="运行模式")
    parser.add_argument("--out", help="输出目录")
    parser.add_argument("--log-level", help="日志级别（默认取 DDL_LOG_LEVEL）")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="运行实验")
    train.add_argument("--excel", action="store_true", help="同时生成 Excel 报表")
    train.add_argument("--plot", action="store_true", help="生成损失曲线")
    train.set_defaults(handler=cmd_train)

    rep = sub.add_parser("replay", help="回放磁带")
    rep.add_argument("tape", help="磁带文件")
    rep.add_argument("--expect", help="记录运行的报告 JSON，用于逐位比对")
    rep.set_defaults(handler=cmd_replay)

    synth = sub.add_parser("synth", help="生成合成磁带")
    synth.add_argument("--tape", help="磁带输出路径")
    synth.set_defaults(handler=cmd_synth)

    chaos = sub.add_parser("chaos-table", help="goodput / uptime 网格")
    chaos.add_argument("--m", default="1,2,4,8,16", help="学习者数列表")
    chaos.add_argument("--n", default="150000,300000,600000,1200000,2400000", help="芯片数列表")
    chaos.add_argument("--steps", type=int, default=100_000, help="每格模拟步数")
    chaos.add_argument("--plot", action="store_true", help="生成热力图")
    chaos.set_defaults(handler=cmd_chaos_table)

    bw = sub.add_parser("bw-table", help="带宽需求表")
    bw.add_argument("--params", type=float, default=5e9, help="参数量")
    bw.add_argument("--bits", type=int, default=16, help="每个参数的比特数")
    bw.add_argument("--H", type=int, default=24, help="同步周期")
    bw.add_argument("--tau", type=int, default=2, help="重叠步数")
    bw.add_argument("--overhead", type=float, default=1.0, help="协议开销倍率")
    bw.set_defaults(handler=cmd_bw_table)

    plan = sub.add_parser("plan-inspect", help="比较分片策略")
    plan.add_argument("--strategy", default="all", choices=["all", "layer", "tensor", "balanced"])
    plan.add_argument("-P", type=int, default=0, help="分片数，默认取配置")
    plan.set_defaults(handler=cmd_plan_inspect)

    ckpt = sub.add_parser("ckpt-resume", help="从快照恢复")
    ckpt.add_argument("--dir", required=True, help="快照目录或 snap_<t> 目录")
    ckpt.add_argument("--tape", help="记录运行的磁带；给定时按磁带回放")
    ckpt.set_defaults(handler=cmd_ckpt_resume)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回退出码"""
    args = build_parser().parse_args(argv)
    try:
        config = _config(args)
        level = args.log_level or config.logging.level
        setup_logging(level, config.logging.log_file)
        ensure_directories(config)
        return args.handler(args, config)
    except ConfigError as e:
        logger.error(f"配置错误: {e}")
        return EXIT_CONFIG
    except ReplayIntegrityError as e:
        logger.error(f"回放校验失败: {e}")
        return EXIT_REPLAY
    except SnapshotIntegrityError as e:
        logger.error(f"快照校验失败: {e}")
        return EXIT_SNAPSHOT
    except Exception as e:
        logger.error(f"{args.command} 执行失败: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
