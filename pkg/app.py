"""
Syntax-augmented attention toolkit - command-line application

Preprocesses CoNLL-U corpora, pre-trains the dependency GAT with the structural
probe, fine-tunes the syntax-augmented encoder, evaluates the probe, inspects
distance/mask structure and verifies gradients.
"""

import argparse
from dataclasses import replace
import logging
import sys
import time
from pathlib import Path
from typing import IO, Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from config import (
    DELTA_PAIR,
    ModelConfig,
    RunConfig,
    TrainingConfig,
    get_settings,
    load_config_document,
)
from core.batching import (
    BatchLoader,
    EncodedExample,
    encode_example,
    load_batch_file,
    save_batch_file,
)
from core.checkpoint import is_container, read_container
from core.conllu import (
    Vocabulary,
    build_vocab,
    group_sentences,
    load_vocab,
    read_conllu_file,
    save_vocab,
    serialize_conllu,
    wordpiece_tokenize,
)
from core.deptree import build_position_graph, depth_vector, distance_matrix, mask_from_distance, word_graph
from core.errors import (
    EXIT_CODES,
    CheckpointFormatError,
    EmptyCorpus,
    ErrorType,
    GradientCheckFailed,
    SyntaxAttentionError,
    UsageError,
)
from core.model import SyntaxAugmentedEncoder, parameter_counts
from core.numcore import grad_check_parameters
from core.probe import evaluate_probe
from core.structure_task import make_structure_task, make_tree_corpus
from core.train import (
    TRAIN_STATE_KIND,
    evaluate_accuracy,
    finetune,
    finetune_with_baseline,
    joint_losses,
    load_train_state,
    pretrain_gat,
    save_train_state,
)
from ui.components import (
    render_grad_check,
    render_inspect,
    render_parameter_counts,
    render_probe_report,
    render_training_summary,
)
from utils.helpers import MetricsWriter, format_duration, setup_logging
from utils.validators import (
    ValidationError,
    parse_index_list,
    validate_choice,
    validate_delta,
    validate_eps,
    validate_input_path,
    validate_positive,
)

logger = logging.getLogger("syntax_attention")


# (field, argparse type, help)
MODEL_FLAGS: List[Tuple[str, Callable, str]] = [
    ("num_layers", int, "encoder layers (L)"),
    ("num_heads", int, "attention heads per layer (h)"),
    ("d_model", int, "hidden width"),
    ("d_k", int, "query/key width per head"),
    ("d_v", int, "value width per head"),
    ("d_ff", int, "feed-forward inner width (default 4*d_model)"),
    ("vocab_size", int, "vocabulary size (default: size of the vocabulary file)"),
    ("max_len", int, "maximum positions per example"),
    ("gat_layers", int, "GAT layers (L_G)"),
    ("gat_heads", int, "GAT heads (k)"),
    ("d_g", int, "GAT head width"),
    ("delta", validate_delta, "GAT mask radius (default 1, or 4 for sentence pairs)"),
    ("alpha", float, "probe-loss weight"),
    ("syntax_layers", parse_index_list, "syntax layers, e.g. 0,1 (default: all)"),
    ("syntax_heads", parse_index_list, "syntax heads, e.g. 0,3"),
    ("probe_rank", int, "probe rank m (default k*d_g)"),
    ("num_labels", int, "task labels"),
    ("init_std", float, "embedding initialization std"),
    ("layer_norm_eps", float, "layer normalization epsilon"),
]
TRAINING_FLAGS: List[Tuple[str, Callable, str]] = [
    ("learning_rate", float, "peak learning rate"),
    ("batch_size", int, "examples per batch"),
    ("epochs", int, "passes over the corpus"),
    ("max_steps", int, "optional cap on optimizer steps"),
    ("warmup_fraction", float, "fraction of steps with linear warmup"),
    ("beta1", float, "Adam beta1"),
    ("beta2", float, "Adam beta2"),
    ("adam_eps", float, "Adam epsilon"),
    ("eval_interval", int, "steps between metric lines"),
    ("checkpoint_every", int, "steps between training-state saves"),
]
TRAINING_SWITCHES = ("word_positions_only", "probe_stop_gradient", "strict_wordpieces", "linear_decay")

GRAD_CHECK_DEFAULTS: Dict[str, Any] = {
    "num_layers": 2, "num_heads": 2, "d_model": 8, "d_k": 4, "d_v": 4,
    "gat_layers": 2, "gat_heads": 2, "d_g": 4, "alpha": 0.5, "max_len": 16,
}


class CliParser(argparse.ArgumentParser):
    """Argument parser that reports usage errors as exceptions."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", help="JSON document with 'model' and 'training' sections")
    common.add_argument("--seed", type=int, default=None, help="seed for initialization and data order")
    common.add_argument("--log-level", default=None, help="logging level (default from settings)")

    model = CliParser(add_help=False)
    group = model.add_argument_group("model")
    for name, kind, text in MODEL_FLAGS:
        group.add_argument(_flag(name), dest=name, type=kind, default=None, help=text)
    group.add_argument("--intervene-self-attention", dest="intervene_self_attention",
                       action="store_true", default=None,
                       help="ablation: syntax heads use the delta mask instead of the syntax bias")

    training = CliParser(add_help=False)
    group = training.add_argument_group("training")
    for name, kind, text in TRAINING_FLAGS:
        group.add_argument(_flag(name), dest=name, type=kind, default=None, help=text)
    for name in TRAINING_SWITCHES:
        group.add_argument(_flag(name), dest=name, action="store_true", default=None)

    data = CliParser(add_help=False)
    data.add_argument("--input", required=True, help="CoNLL-U file or preprocessed batch file")
    data.add_argument("--vocab", help="wordpiece vocabulary, one piece per line")

    parser = CliParser(prog="syntax-attention", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser, metavar="COMMAND")

    p = sub.add_parser("preprocess", parents=[common, model, data], help="CoNLL-U -> batch file")
    p.add_argument("--output", required=True, help="batch file to write")

    p = sub.add_parser("pretrain-gat", parents=[common, model, training, data], help="pre-train the GAT")
    p.add_argument("--output-dir")
    p.add_argument("--checkpoint", help="training state to resume from")

    p = sub.add_parser("train", parents=[common, model, training, data], help="joint fine-tuning")
    p.add_argument("--output-dir")
    p.add_argument("--checkpoint", help="training state to resume from")
    p.add_argument("--gat-checkpoint", help="pre-trained GAT checkpoint")
    p.add_argument("--with-baseline", action="store_true", help="repeat the run with alpha = 0")

    p = sub.add_parser("eval-probe", parents=[common, model, data], help="probe metrics per sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--word-positions-only", dest="word_positions_only", action="store_true", default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--output", help="also write the report to this file")

    p = sub.add_parser("inspect", parents=[common, data], help="print D, M and depths of a sentence")
    p.add_argument("--delta", type=validate_delta, default=None)
    p.add_argument("--graph", default="positions", type=lambda v: validate_choice("--graph", v, ("positions", "words")))
    p.add_argument("--sentence-id", help="sentence to show (default: the first)")

    p = sub.add_parser("grad-check", parents=[common, model], help="full-model finite-difference check")
    p.add_argument("--eps", type=validate_eps, default=None)
    p.add_argument("--coords", type=int, default=None, help="coordinates sampled per parameter (0 = all)")
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("make-task", parents=[common], help="emit a synthetic corpus and its vocabulary")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--output", required=True, help="CoNLL-U file to write")
    p.add_argument("--vocab", help="vocabulary file (default: <output>.vocab)")
    p.add_argument("--kind", default="structure",
                   type=lambda v: validate_choice("--kind", v, ("structure", "trees")),
                   help="structure: labeled even-depth-NOUN task; trees: unlabeled random trees")
    p.add_argument("--max-words", type=int, default=12, help="longest tree for --kind trees")
    return parser


class SyntaxAttentionCLI:
    """Runs one parsed command line."""

    def __init__(self, args: argparse.Namespace, stdout: IO[str]):
        self.args = args
        self.stdout = stdout
        self.settings = get_settings()
        self.document: Dict[str, Any] = {}
        if getattr(args, "config", None):
            try:
                self.document = load_config_document(args.config)
            except (OSError, ValueError) as e:
                raise ValidationError(f"cannot use config document {args.config}: {e}") from None

    # Configuration

    def _seed(self) -> Optional[int]:
        return self.args.seed

    def model_overrides(self) -> Dict[str, Any]:
        values = dict(self.document.get("model", {}))
        for name, _, _ in MODEL_FLAGS + [("intervene_self_attention", None, None)]:
            value = getattr(self.args, name, None)
            if value is not None:
                values[name] = value
        if self._seed() is not None:
            values["seed"] = self._seed()
        return values

    def training_config(self) -> TrainingConfig:
        values = dict(self.document.get("training", {}))
        for name in [f for f, _, _ in TRAINING_FLAGS] + list(TRAINING_SWITCHES):
            value = getattr(self.args, name, None)
            if value is not None:
                values[name] = value
        if self._seed() is not None:
            values["seed"] = self._seed()
        return TrainingConfig(**values)

    def model_config(self, vocab: Optional[Vocabulary], multi_sentence: bool = False,
                     base: Optional[Dict[str, Any]] = None) -> ModelConfig:
        values = dict(base or {})
        values.update(self.model_overrides())
        if vocab is not None:
            if "vocab_size" not in values:
                values["vocab_size"] = len(vocab)
            elif values["vocab_size"] < len(vocab):
                raise UsageError(f"vocab_size {values['vocab_size']} is smaller than the vocabulary ({len(vocab)})")
        if multi_sentence and "delta" not in values:
            values["delta"] = DELTA_PAIR
        return ModelConfig(**values)

    def write_run_config(self, directory: Path, model: Optional[ModelConfig] = None,
                         training: Optional[TrainingConfig] = None, **options) -> None:
        run = RunConfig(
            subcommand=self.args.command,
            input=getattr(self.args, "input", None),
            output=str(directory),
            vocab=getattr(self.args, "vocab", None),
            checkpoint=getattr(self.args, "checkpoint", None),
            gat_checkpoint=getattr(self.args, "gat_checkpoint", None),
            seed=self._seed() or 0,
            model=model or ModelConfig(),
            training=training or TrainingConfig(),
            options=options,
        )
        run.write(directory)

    def output_dir(self) -> Path:
        chosen = getattr(self.args, "output_dir", None)
        path = Path(chosen) if chosen else Path(self.settings.output_dir) / self.args.command
        path.mkdir(parents=True, exist_ok=True)
        return path

    # Data

    def read_vocab(self, words: Sequence[str], fallback: Optional[Sequence[str]] = None) -> Vocabulary:
        if self.args.vocab:
            return load_vocab(validate_input_path(self.args.vocab, "vocabulary"))
        if fallback:
            return Vocabulary(fallback)
        logger.info("No vocabulary given; building one from the corpus")
        return build_vocab(words)

    def load_examples(
        self,
        base_config: Optional[Dict[str, Any]] = None,
        vocab_fallback: Optional[Sequence[str]] = None,
        strict: bool = False,
    ) -> Tuple[List[EncodedExample], ModelConfig, Vocabulary]:
        """Examples, resolved model config and vocabulary from ``--input``."""
        path = validate_input_path(self.args.input)
        if is_container(path):
            delta = getattr(self.args, "delta", None)
            examples, metadata = load_batch_file(path, delta=delta)
            vocab = Vocabulary(metadata["vocab"]) if "vocab" in metadata else self.read_vocab([], vocab_fallback)
            base = dict(base_config or {})
            base.setdefault("delta", int(metadata.get("delta", 1)))
            if "max_len" in metadata:
                base.setdefault("max_len", int(metadata["max_len"]))
            config = self.model_config(vocab, base=base)
            if delta is None and config.delta != metadata.get("delta", 1):
                examples, _ = load_batch_file(path, delta=config.delta)
            return examples, config, vocab

        sentences = read_conllu_file(path)
        if not sentences:
            raise EmptyCorpus("the corpus holds no sentences", source=str(path))
        groups = group_sentences(sentences)
        vocab = self.read_vocab([w for s in sentences for w in s.words], vocab_fallback)
        config = self.model_config(vocab, multi_sentence=any(len(g) > 1 for g in groups), base=base_config)
        examples = [encode_example(group, vocab, config, strict=strict) for group in groups]
        logger.info(f"Encoded {len(examples)} examples from {path}")
        return examples, config, vocab

    def loader(self, examples: Sequence[EncodedExample], batch_size: int, vocab: Vocabulary) -> BatchLoader:
        return BatchLoader(examples, batch_size, shuffle=False, num_workers=self.settings.num_workers,
                           prefetch=self.settings.prefetch_batches, pad_id=vocab.pad_id)

    def emit(self, text: str) -> None:
        self.stdout.write(text)
        self.stdout.flush()

    # Subcommands

    def run(self) -> int:
        handler = getattr(self, "cmd_" + self.args.command.replace("-", "_"))
        started = time.monotonic()
        code = handler()
        logger.info(f"{self.args.command} finished in {format_duration(time.monotonic() - started)}")
        return code

    def cmd_preprocess(self) -> int:
        examples, config, vocab = self.load_examples()
        output = Path(self.args.output)
        save_batch_file(output, examples, {"delta": config.delta, "max_len": config.max_len,
                                           "vocab": vocab.pieces, "source": str(self.args.input)})
        self.write_run_config(output.parent, config)
        self.emit(f"wrote {len(examples)} examples to {output}\n")
        return 0

    def _resume(self, stage: str) -> Tuple[Optional[SyntaxAugmentedEncoder], Any, Optional[Dict[str, Any]]]:
        if not getattr(self.args, "checkpoint", None):
            return None, None, None
        model, state, metadata = load_train_state(validate_input_path(self.args.checkpoint, "checkpoint"))
        if state.stage != stage:
            raise UsageError(f"{self.args.checkpoint} holds a {state.stage} run, not {stage}")
        if getattr(self.args, "with_baseline", False):
            logger.warning("--with-baseline is ignored when resuming")
        logger.info(f"Resuming {state.stage} from step {state.step}")
        return model, state, metadata

    def _report_parameters(self, config: ModelConfig) -> None:
        counts = parameter_counts(config)
        logger.info(f"GAT parameters: {counts['gat']} (total {counts['total']})")

    def cmd_pretrain_gat(self) -> int:
        model, state, metadata = self._resume("pretrain")
        base = metadata["config"] if metadata else None
        fallback = metadata.get("vocab") if metadata else None
        training = self.training_config()
        examples, config, vocab = self.load_examples(base, fallback, strict=training.strict_wordpieces)
        if model is None:
            model = SyntaxAugmentedEncoder(config)
        self._report_parameters(model.config)
        out = self.output_dir()
        self.write_run_config(out, model.config, training)
        with MetricsWriter(out / "metrics.jsonl") as metrics:
            state = pretrain_gat(model, examples, training, state=state, metrics=metrics,
                                 num_workers=self.settings.num_workers, prefetch=self.settings.prefetch_batches,
                                 checkpoint_path=out / "train_state.ckpt", vocab_pieces=vocab.pieces)
        model.save(out / "model.ckpt", vocab.pieces, extra={"stage": "pretrain"})
        save_train_state(out / "train_state.ckpt", model, state, training, vocab.pieces)
        final = state.history[-1] if state.history else None
        self.emit(render_training_summary("pretrain-gat", state.step, final))
        return 0

    def cmd_train(self) -> int:
        model, state, metadata = self._resume("finetune")
        base = metadata["config"] if metadata else None
        fallback = metadata.get("vocab") if metadata else None
        training = self.training_config()
        examples, config, vocab = self.load_examples(base, fallback, strict=training.strict_wordpieces)
        if model is None:
            model = SyntaxAugmentedEncoder(config)
            if self.args.gat_checkpoint:
                model.load_gat_weights(validate_input_path(self.args.gat_checkpoint, "GAT checkpoint"))
        self._report_parameters(model.config)
        out = self.output_dir()
        self.write_run_config(out, model.config, training, with_baseline=bool(self.args.with_baseline))

        batches = self.loader(examples, training.batch_size, vocab)
        with MetricsWriter(out / "metrics.jsonl") as metrics:
            if self.args.with_baseline and state is None:
                state, baseline, _ = finetune_with_baseline(
                    model, examples, training, metrics=metrics,
                    num_workers=self.settings.num_workers, prefetch=self.settings.prefetch_batches,
                    checkpoint_path=out / "train_state.ckpt", vocab_pieces=vocab.pieces)
                baseline.save(out / "baseline.ckpt", vocab.pieces, extra={"stage": "finetune", "run": "alpha0"})
                baseline_accuracy = evaluate_accuracy(baseline, batches)
            else:
                state = finetune(model, examples, training, state=state, metrics=metrics,
                                 num_workers=self.settings.num_workers, prefetch=self.settings.prefetch_batches,
                                 checkpoint_path=out / "train_state.ckpt", vocab_pieces=vocab.pieces)
                baseline_accuracy = None
        model.save(out / "model.ckpt", vocab.pieces, extra={"stage": "finetune"})
        save_train_state(out / "train_state.ckpt", model, state, training, vocab.pieces)

        summary = {"train_accuracy": evaluate_accuracy(model, batches)}
        if baseline_accuracy is not None:
            summary["alpha0_train_accuracy"] = baseline_accuracy
        self.emit(render_training_summary("train", state.step, summary))
        return 0

    def _load_model(self) -> Tuple[SyntaxAugmentedEncoder, Dict[str, Any]]:
        path = validate_input_path(self.args.checkpoint, "checkpoint")
        _, metadata = read_container(path)
        if "config" not in metadata:
            raise CheckpointFormatError("checkpoint header has no model config", source=str(path))
        if metadata.get("kind") == TRAIN_STATE_KIND:
            model, _, metadata = load_train_state(path)
            return model, metadata
        return SyntaxAugmentedEncoder.load(path)

    def cmd_eval_probe(self) -> int:
        model, metadata = self._load_model()
        examples, config, vocab = self.load_examples(metadata["config"], metadata.get("vocab"))
        if config.vocab_size != model.config.vocab_size:
            raise UsageError(f"vocabulary size {config.vocab_size} does not match the checkpoint "
                             f"({model.config.vocab_size})")
        batch_size = self.args.batch_size or TrainingConfig().batch_size
        report = evaluate_probe(model, self.loader(examples, batch_size, vocab),
                                word_positions_only=bool(self.args.word_positions_only))
        text = render_probe_report(report)
        self.emit(text)
        if self.args.output:
            output = Path(self.args.output)
            output.parent.mkdir(parents=True, exist_ok=True)
            output.write_text(text, encoding="utf-8")
            self.write_run_config(output.parent, model.config,
                                  word_positions_only=bool(self.args.word_positions_only))
        return 0

    def cmd_inspect(self) -> int:
        path = validate_input_path(self.args.input)
        sentences = read_conllu_file(path)
        if not sentences:
            raise EmptyCorpus("the corpus holds no sentences", source=str(path))
        if self.args.sentence_id is not None:
            matches = [s for s in sentences if s.sentence_id == self.args.sentence_id]
            if not matches:
                raise UsageError(f"no sentence with id {self.args.sentence_id!r} in {path}")
            sentence = matches[0]
        else:
            sentence = sentences[0]
        delta = self.args.delta or self.document.get("model", {}).get("delta", 1)

        if self.args.graph == "words":
            graph = word_graph(sentence)
            labels = list(sentence.words)
        else:
            vocab = self.read_vocab(sentence.words)
            align = wordpiece_tokenize(sentence.words, vocab)
            graph = build_position_graph(sentence, align)
            labels = ["[CLS]"] + list(align.pieces) + ["[SEP]"]
        D = distance_matrix(graph)
        self.emit(render_inspect(sentence.sentence_id, labels, D, mask_from_distance(D, delta),
                                 depth_vector(graph), delta))
        return 0

    def cmd_grad_check(self) -> int:
        values = dict(GRAD_CHECK_DEFAULTS)
        values.update(self.model_overrides())
        seed = values.get("seed", 0)
        rng = np.random.default_rng(seed)
        # four words -> [CLS] + 4 pieces + [SEP] = 6 positions
        tree = make_tree_corpus(seed, 1, max_words=4, min_words=4)[0]
        sentence = replace(tree, sentence_id="grad-check", label=int(rng.integers(0, 2)))
        vocab = build_vocab(sentence.words)
        values.setdefault("vocab_size", len(vocab))
        config = ModelConfig(**values)
        model = SyntaxAugmentedEncoder(config, rng=rng)
        training = self.training_config()
        examples = [encode_example([sentence], vocab, config)]
        batch = next(iter(BatchLoader(examples, 1, shuffle=False, pad_id=vocab.pad_id)))

        eps = self.args.eps or self.settings.grad_check_eps
        coords = self.args.coords if self.args.coords is not None else self.settings.grad_check_coords
        tolerance = self.args.tolerance or self.settings.grad_check_tolerance
        report = grad_check_parameters(
            lambda: joint_losses(model, batch, training).total,
            model.params, eps=eps, coords_per_param=coords or None, rng=rng,
        )
        if self.args.verbose:
            self.emit(render_parameter_counts(parameter_counts(config)))
        self.emit(render_grad_check(report, tolerance, verbose=self.args.verbose))
        if report.max_error >= tolerance:
            raise GradientCheckFailed(
                f"max relative error {report.max_error:.3e} at {report.worst_parameter} exceeds {tolerance:.0e}")
        return 0

    def cmd_make_task(self) -> int:
        validate_positive("--size", self.args.size)
        seed = self._seed() or 0
        if self.args.kind == "structure":
            corpus = make_structure_task(seed, self.args.size)
        else:
            corpus = make_tree_corpus(seed, self.args.size, max_words=self.args.max_words)
        output = Path(self.args.output)
        output.parent.mkdir(parents=True, exist_ok=True)
        output.write_text(serialize_conllu(corpus), encoding="utf-8")
        vocab_path = Path(self.args.vocab) if self.args.vocab else output.with_suffix(output.suffix + ".vocab")
        save_vocab(build_vocab(w for s in corpus for w in s.words), vocab_path)
        self.write_run_config(output.parent, kind=self.args.kind, size=self.args.size)
        self.emit(f"wrote {len(corpus)} sentences to {output} and vocabulary to {vocab_path}\n")
        return 0


def cli_dispatch(argv: Optional[Sequence[str]] = None, stdout: Optional[IO[str]] = None,
                 stderr: Optional[IO[str]] = None) -> int:
    """Run one command line and return its exit code."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(list(argv) if argv is not None else None)
        settings = get_settings()
        level = args.log_level or ("DEBUG" if settings.enable_debug else settings.log_level)
        try:
            setup_logging(level, stream=stderr)
        except AttributeError:
            raise ValidationError(f"unknown log level {level!r}") from None
        return SyntaxAttentionCLI(args, stdout).run()
    except SystemExit as e:
        return int(e.code or 0)
    except SyntaxAttentionError as e:
        print(e.describe(), file=stderr)
        return e.exit_code
    except PydanticValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ())) or "config"
        print(f"UsageError: invalid {where}: {first.get('msg')}", file=stderr)
        return EXIT_CODES[ErrorType.USAGE]
    except (OSError, ValueError) as e:
        print(f"DataError: {e}", file=stderr)
        return EXIT_CODES[ErrorType.DATA]


def main():
    """Main application entry point."""
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
