"""命令行入口：train / niah / analyze / cost / compare"""
import argparse
import hashlib
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from src import __version__
from src.config.settings import settings
from src.core.attention import AttentionTrace
from src.models.lab_models import REFERENCE_MODEL_CONFIG, ExperimentConfig, load_experiment_config
from src.services.analysis_service import (
    ENTROPY_COLUMNS,
    MASS_COLUMNS,
    SEGMENTS,
    SegmentSpans,
    aggregate_mass,
    attention_entropy,
    attention_mass,
    capture_traces,
    distribution_profile,
    format_entropy_row,
)
from src.services.cost_service import COST_COLUMNS, efficiency_report
from src.services.model_service import TransformerModel, build_layer_pattern
from src.services.niah_service import (
    NeedlesGrid,
    display_name,
    evaluate_grid,
    format_score_row,
    make_sample,
    retrieval_stream,
)
from src.services.training_service import (
    memorization_corpus,
    memorization_stream,
    train,
    write_metrics_csv,
)
from src.utils.artifacts import read_json, write_csv, write_json
from src.utils.error_handling import CheckpointException, ConfigException, handle_error
from src.utils.logging import bind_run_context, clear_run_context, get_structured_logger, setup_logging
from src.utils.metrics import metrics, start_metrics_server
from src.utils.seeding import derive_rng, spawn_seeds

logger = get_structured_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_RUNTIME_ERROR = 2

CHECKPOINT_NAME = "checkpoint.bin"


# ---- 运行上下文 ----

class RunContext:
    """一次子命令调用：解析后的配置、输出目录与配置哈希"""

    def __init__(self, config: ExperimentConfig, out_dir: Path):
        self.config = config
        self.out_dir = out_dir
        self.config_hash = config.config_hash()
        bind_run_context(config_hash=self.config_hash, variant=config.variant)

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunContext":
        config = load_experiment_config(args.config)
        if args.seed is not None:
            config = config.model_copy(update={
                "seed": args.seed,
                "train": config.train.model_copy(update={"seed": args.seed}),
            })
        out_dir = Path(args.out or settings.output.output_dir or config.output_dir)
        return cls(config, out_dir)

    @property
    def name(self) -> str:
        return self.config.name or display_name(self.config.variant, self.config.pattern)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def pattern(self):
        cfg = self.config
        return build_layer_pattern(
            cfg.model.n_layers, cfg.pattern.ratio, cfg.pattern.window, cfg.pattern.theta, cfg.variant,
        )

    def write_config(self) -> None:
        write_json(self.path("config.json"), self.config.model_dump(mode="json"), self.config_hash)

    def load_model(self, checkpoint: Optional[str], random_init: bool) -> TransformerModel:
        cfg = self.config
        if random_init:
            logger.info("使用随机初始化模型", variant=cfg.variant)
            return TransformerModel.initialize(
                cfg.model, self.pattern(), derive_rng(cfg.seed, "init"),
                allow_extrapolation=cfg.allow_extrapolation,
            )
        path = Path(checkpoint) if checkpoint else self.path(CHECKPOINT_NAME)
        if not path.is_file():
            raise CheckpointException(f"checkpoint not found: {path}", component="cli")
        return TransformerModel.load(path, allow_extrapolation=cfg.allow_extrapolation)


# ---- 子命令 ----

def run_train(args: argparse.Namespace) -> int:
    ctx = RunContext.from_args(args)
    cfg = ctx.config
    model = TransformerModel.initialize(
        cfg.model, ctx.pattern(), derive_rng(cfg.seed, "init"),
        dtype=cfg.train.dtype, allow_extrapolation=cfg.allow_extrapolation,
    )
    if cfg.train.task == "memorization":
        longest = max(max(p.short_len, p.long_len) for p in cfg.train.resolved_phases())
        corpus = memorization_corpus(
            cfg.train.memorization_sequences, longest, cfg.model.vocab_size, derive_rng(cfg.seed, "memorize"),
        )
        data = memorization_stream(corpus)
    else:
        data = retrieval_stream(cfg.model.vocab_size, cfg.niah.value_len)

    with metrics.time_stage("train"):
        result = train(model, data, cfg.train)

    ctx.write_config()
    result.model.save(ctx.path(CHECKPOINT_NAME), meta={"config_hash": ctx.config_hash, "version": __version__})
    write_metrics_csv(ctx.path("metrics.csv"), result.log, ctx.config_hash)
    write_json(ctx.path("train_summary.json"), {
        "name": ctx.name,
        "variant": cfg.variant,
        "pattern": result.model.pattern.to_text(),
        "steps": len(result.log),
        "final_loss": result.final_loss,
        "tokens_seen": result.log[-1].tokens_seen if result.log else 0,
    }, ctx.config_hash)
    return EXIT_OK


def run_niah(args: argparse.Namespace) -> int:
    ctx = RunContext.from_args(args)
    cfg = ctx.config
    model = ctx.load_model(args.checkpoint, args.random_init)
    grid = NeedlesGrid.from_config(cfg.niah)

    with metrics.time_stage("niah"):
        result = evaluate_grid(model, grid, cfg.model.vocab_size)

    write_csv(ctx.path("niah_cells.csv"), ("length", "depth", "seed", "pass"), result.rows(), ctx.config_hash)
    write_csv(
        ctx.path("niah_heatmap.csv"),
        ("depth", *[str(n) for n in grid.lengths]),
        result.heatmap_rows(),
        ctx.config_hash,
    )
    summary = result.summary()
    summary.update({
        "name": ctx.name,
        "variant": cfg.variant,
        "score_row": format_score_row(ctx.name, summary["score"]),
        "random_init": bool(args.random_init),
    })
    write_json(ctx.path("niah_summary.json"), summary, ctx.config_hash)
    logger.info("NIAH评测完成", score=summary["score"], row=summary["score_row"])
    return EXIT_OK


def _live_traces(ctx: RunContext, args: argparse.Namespace) -> List[AttentionTrace]:
    cfg = ctx.config
    model = ctx.load_model(args.checkpoint, args.random_init)
    seeds = spawn_seeds(cfg.seed, "analysis", cfg.analysis.samples)
    samples = [
        make_sample(length, cfg.analysis.depth, seed, cfg.model.vocab_size, cfg.niah.value_len)
        for length in cfg.analysis.lengths
        for seed in seeds
    ]
    traces = capture_traces(model, samples)
    if args.save_traces:
        for index, trace in enumerate(traces):
            trace.save(ctx.path(f"traces/trace_{trace.length}_{index}.bin"))
    return traces


def run_analyze(args: argparse.Namespace) -> int:
    ctx = RunContext.from_args(args)
    cfg = ctx.config
    if args.trace:
        traces = [AttentionTrace.load(path) for path in args.trace]
    else:
        traces = _live_traces(ctx, args)
    spans = [SegmentSpans.from_metadata(t.metadata) for t in traces]
    variant = ctx.name
    expected_kinds = list(dict.fromkeys(ctx.pattern().kinds))

    by_length: Dict[int, List[int]] = {}
    for index, trace in enumerate(traces):
        by_length.setdefault(trace.length, []).append(index)

    if cfg.analysis.mass:
        reports = []
        for length, indices in sorted(by_length.items()):
            masses = [attention_mass(traces[i], spans[i]) for i in indices]
            reports.append(aggregate_mass(masses, expected_kinds, variant=variant, length=length))
        rows = [row for report in reports for row in report.rows()]
        write_csv(ctx.path("mass.csv"), MASS_COLUMNS, rows, ctx.config_hash)
        write_json(ctx.path("mass.json"), {"name": variant, "reports": [r.to_dict() for r in reports]},
                   ctx.config_hash)

    if cfg.analysis.entropy:
        entries = []
        for mode in cfg.analysis.entropy_modes:
            entries.extend(attention_entropy(traces, spans, mode, variant).entries)
        write_csv(ctx.path("entropy.csv"), ENTROPY_COLUMNS,
                  [[e.variant, e.length, e.mode, e.entropy, e.rows] for e in entries], ctx.config_hash)
        write_json(ctx.path("entropy.json"), {
            "name": variant,
            "entries": [
                {"length": e.length, "mode": e.mode, "entropy": e.entropy, "rows": e.rows,
                 "label": format_entropy_row(variant, e.length, e.entropy)}
                for e in entries
            ],
        }, ctx.config_hash)

    if cfg.analysis.distribution:
        for length, indices in sorted(by_length.items()):
            profile = distribution_profile([traces[i] for i in indices], [spans[i] for i in indices])
            write_csv(ctx.path(f"distribution_{length}.csv"), profile.columns(), profile.rows(), ctx.config_hash)

    logger.info("注意力分析完成", traces=len(traces), lengths=sorted(by_length))
    return EXIT_OK


def run_cost(args: argparse.Namespace) -> int:
    ctx = RunContext.from_args(args)
    cfg = ctx.config
    model_config = REFERENCE_MODEL_CONFIG if cfg.cost.use_reference_config else cfg.model
    pattern_args = (model_config.n_layers, cfg.pattern.ratio, cfg.pattern.window, cfg.pattern.theta)
    baseline = build_layer_pattern(*pattern_args, cfg.cost.baseline_variant)
    hybrid = build_layer_pattern(*pattern_args, cfg.variant)

    report = efficiency_report(baseline, hybrid, model_config, cfg.cost.lengths, cfg.cost.bytes_per_elem)
    write_csv(ctx.path("cost.csv"), COST_COLUMNS, report.rows(), ctx.config_hash)
    write_json(ctx.path("cost.json"), report.to_dict(), ctx.config_hash)
    for row in report.rows_by_length:
        logger.info("成本核算", length=row.length, pair_ratio=row.pair_ratio, kv_ratio=row.kv_ratio,
                    kv_reduction_percent=round(row.kv_reduction_percent, 4))
    return EXIT_OK


def run_compare(args: argparse.Namespace) -> int:
    runs = [Path(p) for p in args.runs]
    out_dir = Path(args.out or settings.output.output_dir or "runs/compare")

    score_rows = []
    mass_rows = []
    hashes = []
    for run in runs:
        summary_path = run / "niah_summary.json"
        if not summary_path.is_file():
            raise FileNotFoundError(summary_path)
        summary = read_json(summary_path)
        hashes.append(summary.get("_meta", {}).get("config_hash", ""))
        score_rows.append([summary["name"], round(summary["score"], 2)])

        mass_path = run / "mass.json"
        if mass_path.is_file():
            for report in read_json(mass_path)["reports"]:
                for kind, masses in report["groups"].items():
                    mass_rows.append([summary["name"], report["length"], kind,
                                      *[masses[segment] for segment in SEGMENTS]])

    combined_hash = hashlib.sha256("|".join(hashes).encode("utf-8")).hexdigest()
    write_csv(out_dir / "compare_niah.csv", ("Model", "Needles Score"), score_rows, combined_hash)
    if mass_rows:
        write_csv(out_dir / "compare_mass.csv",
                  ("Model", "Length", "Kind", "Begin", "Needle", "Context", "End"), mass_rows, combined_hash)
    write_json(out_dir / "compare.json", {
        "runs": [p.as_posix() for p in runs],
        "needles": [format_score_row(name, score) for name, score in score_rows],
    }, combined_hash)
    logger.info("对比报告完成", runs=len(runs), out=str(out_dir))
    return EXIT_OK


# ---- 参数解析 ----

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rnope-lab", description="Desk-scale hybrid attention laboratory")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        return p

    train_parser = experiment("train", "train a model and write checkpoint + metrics")
    train_parser.set_defaults(handler=run_train)

    for name, handler, help_text in (
        ("niah", run_niah, "score the needles grid"),
        ("analyze", run_analyze, "attention mass / entropy / distribution analysis"),
    ):
        p = experiment(name, help_text)
        p.add_argument("--checkpoint", default=None, help=f"checkpoint path (default <out>/{CHECKPOINT_NAME})")
        p.add_argument("--random-init", action="store_true", help="evaluate an untrained model")
        p.set_defaults(handler=handler)
        if name == "analyze":
            p.add_argument("--trace", nargs="+", default=None, help="analyze stored trace files")
            p.add_argument("--save-traces", action="store_true", help="store captured traces under <out>/traces")

    experiment("cost", "analytic attention / KV-cache cost table").set_defaults(handler=run_cost)

    compare = sub.add_parser("compare", help="join run outputs into comparison tables")
    compare.add_argument("--runs", nargs="+", required=True, help="run output directories")
    compare.add_argument("--out", default=None, help="output directory")
    compare.set_defaults(handler=run_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    if settings.monitoring.enable_prometheus:
        start_metrics_server(settings.monitoring.prometheus_port)

    clear_run_context()
    bind_run_context(command=args.command)
    logger.info("执行子命令")
    try:
        code = args.handler(args)
    except (ConfigException, ValidationError) as e:
        info = handle_error(e, component="cli", context={"command": args.command})
        print(f"config error: {info.message}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except Exception as e:
        info = handle_error(e, component="cli", context={"command": args.command})
        print(f"error: {info.message}", file=sys.stderr)
        return EXIT_RUNTIME_ERROR
    else:
        logger.info("子命令完成", exit_code=code)
        return code
    finally:
        clear_run_context()


if __name__ == "__main__":
    sys.exit(main())
