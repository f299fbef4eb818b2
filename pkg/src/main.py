"""
DCG 多模态车辆重识别 命令行入口

    python src/main.py generate-data --config configs/smoke.toml --out data/smoke
    python src/main.py train --config configs/smoke.toml --out runs/smoke
    python src/main.py eval --checkpoint runs/smoke/checkpoint.pt --sweep-missing
    python src/main.py ablate --config configs/smoke.toml --variants full,feed_all

退出码：0 成功，1 运行时失败，2 用法或配置错误
"""

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from cli.commands import LOG_FORMAT, parse_variants, run_ablation, run_eval, run_generate, run_train
from config.settings import RunConfig, apply_overrides, load_settings
from core.errors import CheckpointError, ConfigurationError, RunLockError
from core.types import Exclusion, Modality
from infrastructure.checkpoint import load_checkpoint

logger = logging.getLogger("DCG")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="DCG 多模态车辆重识别：数据生成、训练、评估与消融")
    parser.add_argument("--verbose", action="store_true", help="显示 DEBUG 日志")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate-data", help="生成合成数据集并导出为目录格式")
    generate.add_argument("--config", help="TOML 配置文件")
    generate.add_argument("--out", required=True, help="数据集输出目录")
    generate.add_argument("--seed", type=int, help="覆盖 data.synth.seed")

    train = commands.add_parser("train", help="训练模型")
    train.add_argument("--config", help="TOML 配置文件")
    train.add_argument("--out", help="输出目录（默认 output_dir）")
    train.add_argument("--epochs", type=int, help="覆盖 optim.epochs")
    train.add_argument("--seed", type=int, help="覆盖 seed")
    train.add_argument("--data", help="数据集根目录（切换为 directory 数据源）")
    train.add_argument("--resume", help="从检查点续训（检查点记录的 epoch 之后继续）")

    evaluate = commands.add_parser("eval", help="评估检查点")
    evaluate.add_argument("--checkpoint", required=True, help="检查点路径")
    evaluate.add_argument("--config", help="TOML 配置文件（默认使用检查点内的配置）")
    evaluate.add_argument("--out", help="输出目录")
    evaluate.add_argument("--data", help="数据集根目录（切换为 directory 数据源）")
    evaluate.add_argument("--exclusion", choices=[e.value for e in Exclusion], help="图库排除规则")
    evaluate.add_argument("--missing", default="", help="缺失模态，例如 rgb 或 rgb+nir")
    evaluate.add_argument("--sweep-missing", action="store_true", help="运行 6 种缺失模式扫描")
    evaluate.add_argument("--audit", action="store_true", help="写出逐样本审计流 audit.jsonl")
    evaluate.add_argument("--export-embeddings", action="store_true", help="导出嵌入矩阵与附带 JSON")

    ablate = commands.add_parser("ablate", help="消融实验")
    ablate.add_argument("--config", help="TOML 配置文件")
    ablate.add_argument("--out", help="输出目录")
    ablate.add_argument("--epochs", type=int, help="覆盖 optim.epochs")
    ablate.add_argument("--seed", type=int, help="覆盖 seed")
    ablate.add_argument("--variants", help="逗号分隔的变体列表")
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {
        "optim.epochs": getattr(args, "epochs", None),
        "output_dir": getattr(args, "out", None),
    }
    if args.command == "generate-data":
        overrides["data.synth.seed"] = args.seed
    else:
        overrides["seed"] = getattr(args, "seed", None)
    if getattr(args, "data", None):
        overrides["data.source"] = "directory"
        overrides["data.root"] = args.data
    return overrides


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = collect_overrides(args)
    if args.command == "eval" and not args.config:
        return apply_overrides(load_checkpoint(args.checkpoint).config(), overrides)
    return load_settings(args.config, overrides)


def dispatch(args: argparse.Namespace, config: RunConfig) -> None:
    if args.command == "generate-data":
        run_generate(config, args.out)
    elif args.command == "train":
        run_train(config, args.out, resume=args.resume)
    elif args.command == "eval":
        try:
            missing = Modality.parse_pattern(args.missing)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        run_eval(
            config,
            args.checkpoint,
            args.out,
            exclusion=args.exclusion,
            missing=missing,
            sweep=args.sweep_missing,
            audit=args.audit,
            embeddings=args.export_embeddings,
        )
    elif args.command == "ablate":
        run_ablation(config, parse_variants(args.variants), args.out)


def main(argv: Optional[List[str]] = None) -> int:
    """程序主入口"""
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    try:
        config = resolve_config(args)
        level = logging.getLevelName(config.log_level.upper())
        logging.getLogger().setLevel(logging.DEBUG if args.verbose else level if isinstance(level, int) else logging.INFO)
        dispatch(args, config)
    except (ConfigurationError, ValidationError, RunLockError) as e:
        logger.error(f"配置错误: {e}")
        return EXIT_USAGE
    except CheckpointError as e:
        logger.error(f"检查点错误: {e}")
        return EXIT_USAGE if e.mismatch else EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"运行失败: {e}")
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
