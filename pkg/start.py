#!/usr/bin/env python3
"""
解耦分片训练桌面实现 - 启动脚本
交互式菜单，每一项转给 main.py 的子命令
"""
import importlib.util
import os
import sys

# 添加src目录到Python路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))


MENU = [
    ("运行解耦训练（确定性调度）", ["train", "--plot"]),
    ("运行解耦训练（实时线程）", ["--mode", "live", "train"]),
    ("运行数据并行参考", ["--config", "configs/dp.conf", "train", "--plot"]),
    ("生成合成磁带", ["synth"]),
    ("故障网格 goodput 表", ["chaos-table", "--steps", "20000", "--plot"]),
    ("带宽需求表", ["bw-table"]),
    ("分片策略对比", ["plan-inspect"]),
]


REQUIRED = ["numpy", "scipy", "pandas", "pydantic_settings", "yaml"]
OPTIONAL = ["openpyxl", "matplotlib"]


def check_environment() -> bool:
    """检查依赖包，缺少必需包时返回 False"""
    missing = [name for name in REQUIRED if importlib.util.find_spec(name) is None]
    for name in OPTIONAL:
        if importlib.util.find_spec(name) is None:
            print(f"⚠️ 未安装 {name}，Excel 报表或图表不可用")
    if missing:
        print(f"❌ 缺少依赖: {', '.join(missing)}，请先运行 pip install -r requirements.txt")
        return False
    return True


def run_choice(index: int, config: str = "") -> int:
    """执行菜单项，返回退出码"""
    from main import main as cli_main

    title, argv = MENU[index]
    if config and "--config" not in argv:
        argv = ["--config", config] + argv
    print(f"▶ {title}")
    code = cli_main(argv)
    print("完成" if code == 0 else f"失败，退出码 {code}")
    return code


def main():
    """主函数"""
    print("解耦分片训练桌面实验")
    if not check_environment():
        sys.exit(1)
    print("=" * 50)
    for i, (title, _) in enumerate(MENU, 1):
        print(f"{i}. {title}")
    print(f"{len(MENU) + 1}. 退出")
    print("=" * 50)

    try:
        choice = input(f"请选择要执行的操作 (1-{len(MENU) + 1}): ").strip()
        if choice.isdigit() and 1 <= int(choice) <= len(MENU):
            config = os.environ.get("DDL_CONFIG", "")
            sys.exit(run_choice(int(choice) - 1, config))
        elif choice == str(len(MENU) + 1):
            print("程序退出")
        else:
            print("无效选择，请重新运行程序")
    except KeyboardInterrupt:
        print("\n程序被用户中断")
    except EOFError:
        print("\n程序退出")


if __name__ == "__main__":
    main()
