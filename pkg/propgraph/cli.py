"""Command-line interface for PropGraph-QA."""

import json
import logging
import sys
import time
from collections.abc import Callable
from contextlib import ExitStack
from pathlib import Path
from typing import Any, cast

import click
from pydantic import ValidationError

from .client_factory import create_gateway
from .config import RetrievalMode, RunConfig, SourceFormat, UnitKind, Weighting, get_config
from .corpus import QuestionRecord, corpus_hash, load_corpus, load_question_set
from .errors import (
    EXIT_BACKEND,
    EXIT_USAGE,
    BackendError,
    ConfigError,
    IndexStoreError,
    PropGraphError,
    exit_code_for,
    handle_config_error,
)
from .evaluation import (
    RetrievalEvalMode,
    evaluate_economy,
    evaluate_plans,
    evaluate_qa,
    evaluate_retrieval,
    evaluate_units,
    load_traces,
    read_indexing_tokens,
    write_json,
    write_records_csv,
    write_retrieval_csv,
)
from .graph_store import MANIFEST_FILE, BuildInfo, check_manifest, load, persist
from .indexer import IndexBuilder
from .llm_gateway import LLMGateway, ledger_report
from .pipeline import Pipeline
from .retrieval import Retriever
from .version import __version__

logger = logging.getLogger(__name__)

INDEXING_TOKENS_FILE = "indexing_tokens.json"

# CLI option name -> dotted RunConfig path
OPTION_PATHS = {
    "corpus": "corpus_path",
    "questions": "questions_path",
    "source_format": "source_format",
    "index_dir": "index_dir",
    "traces_dir": "traces_dir",
    "output_dir": "output_dir",
    "fixtures": "fixtures_path",
    "log_level": "log_level",
    "seed": "seed",
    "workers": "workers",
    "backend": "backend.backend",
    "lambda_": "retrieval.lambda",
    "m": "retrieval.m",
    "k_entities": "retrieval.k_entities",
    "d_passages": "retrieval.d_passages",
    "weighting": "retrieval.weighting",
    "mode": "retrieval.mode",
    "max_iterations": "agent.max_iterations",
}


class PropGraphGroup(click.Group):
    """Click group that maps package errors onto the exit code contract.

    0 success, 1 usage or configuration, 2 data, 3 backend.
    """

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = EXIT_USAGE
            raise
        except (click.exceptions.Exit, click.ClickException, click.Abort):
            raise
        except (ConfigError, ValidationError) as e:
            handle_config_error(e)
            ctx.exit(EXIT_USAGE)
        except PropGraphError as e:
            click.echo(f"❌ {e}", err=True)
            ctx.exit(e.exit_code)
        except Exception as e:
            click.echo(f"❌ Unexpected error: {e}", err=True)
            ctx.exit(exit_code_for(e))


def setup_logging(log_level: str) -> None:
    """Setup logging configuration without disrupting test capture.

    Configures a StreamHandler to stdout and sets the root logger level,
    but avoids forcefully resetting existing handlers so pytest's caplog
    (and other handlers) continue to work.

    Args:
        log_level: Log level (DEBUG, INFO, WARNING, ERROR)
    """
    level = getattr(logging, log_level, logging.INFO)

    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    # Find existing stdout stream handler if present to avoid duplicates
    stdout_handler: logging.Handler | None = None
    for h in root_logger.handlers:
        if isinstance(h, logging.StreamHandler) and getattr(h, "stream", None) is sys.stdout:
            stdout_handler = h
            break

    fmt = logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")

    if stdout_handler is None:
        stdout_handler = logging.StreamHandler(sys.stdout)
        root_logger.addHandler(stdout_handler)
    stdout_handler.setLevel(level)
    stdout_handler.setFormatter(fmt)


def run_options(func: Callable[..., Any]) -> Callable[..., Any]:
    """Options shared by every command; each mirrors a RunConfig field."""
    options = [
        click.option("--config", "config_path", type=click.Path(path_type=Path), help="JSON run configuration"),
        click.option("--corpus", type=click.Path(path_type=Path), help="Corpus JSONL file"),
        click.option("--questions", type=click.Path(path_type=Path), help="Question set JSONL file"),
        click.option("--source-format", type=click.Choice([f.value for f in SourceFormat]), help="Input schema"),
        click.option("--index-dir", type=click.Path(path_type=Path), help="Index directory"),
        click.option("--traces-dir", type=click.Path(path_type=Path), help="Trace directory"),
        click.option("--output-dir", type=click.Path(path_type=Path), help="Report directory"),
        click.option("--fixtures", type=click.Path(path_type=Path), help="Scripted mock responses"),
        click.option("--backend", type=click.Choice(["mock", "http"]), help="LLM backend"),
        click.option(
            "--log-level",
            type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"], case_sensitive=False),
            help="Override log level",
        ),
        click.option("--seed", type=int, help="Random seed"),
        click.option("--workers", type=int, help="Concurrent questions or extraction calls"),
        click.option("--lambda", "lambda_", type=float, help="BM25 weight in the hybrid score"),
        click.option("--m", type=int, help="Propositions retrieved per search"),
        click.option("--k-entities", type=int, help="Candidate entities per search"),
        click.option("--d-passages", type=int, help="Passages kept per iteration"),
        click.option("--weighting", type=click.Choice([w.value for w in Weighting]), help="Passage voting scheme"),
        click.option("--mode", type=click.Choice([m.value for m in RetrievalMode]), help="Retrieval mode"),
        click.option("--max-iterations", type=int, help="Traversal iterations per sub-agent"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def resolve_config(options: dict[str, Any], extra: dict[str, Any] | None = None) -> RunConfig:
    """Build the run configuration from shared options, set up logging and print it."""
    config_path = options.pop("config_path", None)
    overrides = {OPTION_PATHS[name]: value for name, value in options.items() if name in OPTION_PATHS}
    overrides.update(extra or {})
    config = get_config(config_path, overrides)

    setup_logging(config.log_level)
    click.echo("Resolved configuration:")
    click.echo(json.dumps(config.resolved_summary(), indent=2, sort_keys=True))
    return config


def open_gateway(stack: ExitStack, config: RunConfig) -> LLMGateway:
    """Create the gateway and register backend cleanup on the stack.

    Backends that can check their connection are checked before any work starts.
    """
    gateway = create_gateway(config)
    for backend in (gateway.chat_backend, gateway.embedding_backend):
        close = getattr(backend, "close", None)
        if callable(close):
            stack.callback(cast("Callable[[], object]", close))
    test_connection = getattr(gateway.chat_backend, "test_connection", None)
    if callable(test_connection):
        logger.info("Testing backend connection...")
        if not test_connection():
            raise BackendError(f"cannot reach chat backend at {config.backend.base_url}", stage="preflight")
    return gateway


def require_questions(config: RunConfig) -> list[QuestionRecord]:
    if config.questions_path is None:
        raise click.UsageError("no question set given; pass --questions or set questions_path")
    return load_question_set(config.questions_path, config.source_format)


def load_index(config: RunConfig, gateway: LLMGateway) -> Retriever:
    index = load(config.index_dir)
    check_manifest(index, gateway.dimension, config.backend.embedding_model)
    return Retriever(index, config.retrieval, gateway)


@click.group(cls=PropGraphGroup)
@click.version_option(version=__version__)
def cli() -> None:
    """PropGraph-QA: multi-hop question answering over a proposition graph."""
    pass


@cli.command()
@run_options
@click.option("--force", is_flag=True, help="Overwrite an existing index")
@click.option("--sentence-mode", is_flag=True, help="Index sentences instead of extracted propositions")
@click.option("--tau", type=float, help="Entity merge threshold")
@click.option("--batch-size", type=int, help="Passages per extraction call")
def index(force: bool, sentence_mode: bool, tau: float | None, batch_size: int | None, **options: Any) -> None:
    """Build and persist the proposition graph for a corpus."""
    config = resolve_config(
        options,
        {
            "index.tau": tau,
            "index.batch_size": batch_size,
            "index.unit": UnitKind.SENTENCE.value if sentence_mode else None,
        },
    )
    if config.corpus_path is None:
        raise click.UsageError("no corpus given; pass --corpus or set corpus_path")
    if (config.index_dir / MANIFEST_FILE).exists() and not force:
        raise IndexStoreError(f"index exists at {config.index_dir}; pass --force to overwrite it")

    corpus = load_corpus(config.corpus_path, config.source_format, config.index.longbench_delimiter)
    with ExitStack() as stack:
        gateway = open_gateway(stack, config)
        build_info = BuildInfo(
            chat_model=config.backend.chat_model,
            embedding_model=config.backend.embedding_model,
            tau=config.index.tau,
            lambda_=config.retrieval.lambda_,
            unit=config.index.unit.value,
            source_format=config.source_format.value,
            corpus_hash=corpus_hash(corpus),
        )
        builder = IndexBuilder(gateway, config.index, config.source_format, build_info, workers=config.workers)
        graph, report = builder.build(corpus)

    persist(graph, config.index_dir)
    entries = gateway.ledger.entries
    write_json(
        config.index_dir / INDEXING_TOKENS_FILE,
        {
            "calls": len(entries),
            "input_tokens": sum(e.input_tokens for e in entries),
            "output_tokens": sum(e.output_tokens for e in entries),
            "total_tokens": gateway.ledger.indexing_total,
            "failed_passages": report.failed_passages,
            "retried_passages": report.retried_passage_ids,
        },
    )
    gateway.ledger.export_csv(config.index_dir / "indexing_ledger.csv")

    click.echo("\n" + "=" * 50)
    click.echo("INDEX SUMMARY")
    click.echo("=" * 50)
    click.echo(f"Passages: {report.passages}")
    click.echo(f"Units: {report.propositions}")
    click.echo(f"Entities: {report.entities} ({report.merged_entities} merges)")
    click.echo(f"Extraction calls: {report.extraction_calls}")
    click.echo(f"Indexing tokens: {gateway.ledger.indexing_total}")
    if report.failed_passages:
        click.echo(f"Failed passages ({len(report.failed_passages)}):")
        for passage_id, reason in list(report.failed_passages.items())[:10]:
            click.echo(f"  {passage_id}: {reason}")


@cli.command()
@run_options
@click.argument("question", required=False)
@click.option("--question-id", default="q0", show_default=True, help="Id for a single question")
def answer(question: str | None, question_id: str, **options: Any) -> None:
    """Answer one QUESTION, or every question in the question set."""
    if question is not None and not question.strip():
        raise click.UsageError("question must not be empty")
    config = resolve_config(options)

    if question is not None:
        items = [(question_id, question)]
    else:
        items = [(q.question_id, q.question) for q in require_questions(config)]

    started = time.perf_counter()
    with ExitStack() as stack:
        gateway = open_gateway(stack, config)
        retriever = load_index(config, gateway)
        pipeline = Pipeline(retriever, gateway, config.agent, config.retrieval)
        results = pipeline.answer_many(items, workers=config.workers, traces_dir=config.traces_dir)
    elapsed = time.perf_counter() - started
    gateway.ledger.export_csv(config.traces_dir / "ledger.csv")

    for result in results:
        status = f" [{result.failure}]" if result.failure else ""
        click.echo(f"{result.question_id}: {result.final_answer or '(no answer)'}{status}")
    total = ledger_report(gateway.ledger, [r.question_id for r in results]).inference_total
    click.echo(
        f"Answered {len(results)} question(s) with {total} tokens in {elapsed:.1f}s; traces in {config.traces_dir}"
    )

    if any(r.backend_error for r in results):
        sys.exit(EXIT_BACKEND)


@cli.group(name="eval", cls=PropGraphGroup)
def eval_group() -> None:
    """Compute metrics over traces, retrieval and index units."""
    pass


@eval_group.command(name="qa")
@run_options
@click.option("--judge/--no-judge", default=None, help="Run the LLM judge (both prompt variants)")
def eval_qa(judge: bool | None, **options: Any) -> None:
    """EM, F1 and optional judge verdicts for answered questions."""
    config = resolve_config(options, {"evaluation.judge": judge})
    questions = require_questions(config)
    traces = load_traces(config.traces_dir)

    with ExitStack() as stack:
        gateway = open_gateway(stack, config) if config.evaluation.judge else None
        report = evaluate_qa(
            traces,
            questions,
            gateway=gateway,
            indexing_tokens=read_indexing_tokens(config.index_dir),
            run_judge=config.evaluation.judge,
            workers=config.workers,
        )

    summary = report.summary()
    write_json(config.output_dir / "qa_summary.json", summary)
    write_records_csv(config.output_dir / "qa_records.csv", report.records)
    click.echo(f"Questions: {summary['questions']}")
    click.echo(f"EM: {_show(summary['em'])}  F1: {_show(summary['f1'])}")
    if config.evaluation.judge:
        judged = summary["judge"]
        click.echo(
            f"Judge LR-1: {_show(judged['lr1_yes'])}  LR-2: {_show(judged['lr2_yes'])} "
            f"(with partial {_show(judged['lr2_yes_or_partial'])})"
        )
    _warn_mismatches(summary["warnings"])


@eval_group.command(name="economy")
@run_options
@click.option("--samples", type=int, help="Closed-book samples per question")
def eval_economy(samples: int | None, **options: Any) -> None:
    """Sample closed-book difficulty, then tokens per weighted correct answer."""
    config = resolve_config(options, {"evaluation.difficulty_n": samples})
    questions = require_questions(config)
    traces = load_traces(config.traces_dir)

    with ExitStack() as stack:
        gateway = open_gateway(stack, config)
        qa = evaluate_qa(traces, questions, indexing_tokens=read_indexing_tokens(config.index_dir))
        report = evaluate_economy(
            qa,
            questions,
            gateway,
            n=config.evaluation.difficulty_n,
            temperature=config.evaluation.difficulty_temperature,
            workers=config.workers,
        )

    summary = report.summary()
    write_json(config.output_dir / "economy_summary.json", summary)
    write_records_csv(config.output_dir / "economy_records.csv", report.qa.records)
    if report.economy.undefined:
        click.echo("C_w undefined (no correct answers)")
    else:
        click.echo(f"C_w: {summary['c_w']:.2f} tokens per weighted correct answer")
    click.echo(f"Total tokens: {summary['total_tokens']:.0f}; weighted correct: {summary['weighted_correct']:.4f}")
    if summary["unsampled_questions"]:
        unsampled = ", ".join(summary["unsampled_questions"])
        click.echo(f"⚠️  No difficulty sample succeeded for: {unsampled}; r is the zero-sample prior", err=True)
    _warn_mismatches(summary["warnings"])


@eval_group.command(name="retrieval")
@run_options
@click.option(
    "--eval-mode",
    type=click.Choice([m.value for m in RetrievalEvalMode] + ["both"]),
    default="both",
    show_default=True,
    help="Retrieval evaluation mode",
)
@click.option("--k", type=int, help="Passages per retrieval query")
def eval_retrieval(eval_mode: str, k: int | None, **options: Any) -> None:
    """Recall@k of gold passages, without an LLM in the loop."""
    config = resolve_config(options, {"evaluation.retrieval_k": k})
    questions = require_questions(config)
    modes = list(RetrievalEvalMode) if eval_mode == "both" else [RetrievalEvalMode(eval_mode)]

    with ExitStack() as stack:
        gateway = open_gateway(stack, config)
        retriever = load_index(config, gateway)
        for mode in modes:
            report = evaluate_retrieval(retriever, questions, mode, config.evaluation.retrieval_k)
            write_json(config.output_dir / f"retrieval_{mode}.json", report.summary())
            write_retrieval_csv(config.output_dir / f"retrieval_{mode}.csv", report)
            for record in report.records:
                click.echo(f"{mode} {record.question_id}: recall {record.recall:.3f}")
            click.echo(f"{mode} recall@{report.k} ({report.weighting}): {_show(report.summary()['recall'])}")


@eval_group.command(name="plan")
@run_options
def eval_plan(**options: Any) -> None:
    """Planned step count against true hop count."""
    config = resolve_config(options)
    report = evaluate_plans(load_traces(config.traces_dir), require_questions(config))
    summary = report.summary()
    write_json(config.output_dir / "plan_summary.json", summary)
    click.echo(f"{'hops':<10}{'n':>5}{'acc':>8}{'dev':>8}{'EM=':>8}{'EM!=':>8}")
    for row in summary["rows"]:
        click.echo(
            f"{row['hops']:<10}{row['questions']:>5}{_show(row['plan_accuracy']):>8}"
            f"{_show(row['avg_deviation']):>8}{_show(row['em_match']):>8}{_show(row['em_no_match']):>8}"
        )
    _warn_mismatches(summary["warnings"])


@eval_group.command(name="units")
@run_options
def eval_units(**options: Any) -> None:
    """NDCG@5 of index units ranked against each question."""
    config = resolve_config(options)
    questions = require_questions(config)
    with ExitStack() as stack:
        gateway = open_gateway(stack, config)
        retriever = load_index(config, gateway)
        report = evaluate_units(retriever.index, gateway, questions)
    summary = report.summary()
    write_json(config.output_dir / "units_summary.json", summary)
    click.echo(f"Unit NDCG@5 over {summary['questions']} questions: {_show(summary['ndcg_at_5'])}")


def _show(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _warn_mismatches(count: int) -> None:
    if count:
        click.echo(f"⚠️  {count} trace/gold id mismatch(es) excluded; see the log", err=True)


if __name__ == "__main__":
    cli()
