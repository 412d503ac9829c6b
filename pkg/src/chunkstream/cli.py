"""Command-line surface: gen, train, align, decode, latency, longform.

Chunk geometry arrives in seconds and is converted to frame counts
against the data's frame duration; non-integral results are rejected.  Exit codes: 0 success, 2 usage/config error, 3 data
error, 4 numerical or search failure.  CHUNKSTREAM_THREADS caps --jobs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataio, metrics, synthetic
from .chunking import ChunkSpec
from .decoder import Vocab
from .encoder import EncoderConfig
from .decoder import DecoderConfig
from .errors import ChunkstreamError, ConfigError, DataError, NumericalError, SearchError
from .lm import NGramLM, read_arpa, write_arpa
from .model import Model, ModelConfig
from .search import BeamConfig, FusionConfig, beam_search, greedy_decode
from .training import TrainConfig, extract_chunkwise_alignments, train_stage

log = logging.getLogger("chunkstream")


def _log_resolved(name: str, values: dict) -> None:
    log.info("resolved %s config:", name)
    for key in sorted(values):
        log.info("  %s = %s", key, values[key])


def _jobs(requested: int) -> int:
    cap = os.environ.get("CHUNKSTREAM_THREADS")
    if cap is not None:
        try:
            requested = min(requested, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"CHUNKSTREAM_THREADS must be an integer, got {cap!r}") from None
    return max(1, requested)


def _chunk_spec(args, frame_ms: int) -> ChunkSpec | None:
    if args.chunk_size is None:
        if args.lookahead is not None or getattr(args, "carry_over", None) not in (None, 0):
            raise ConfigError("--lookahead/--carry-over require --chunk-size")
        return None
    return ChunkSpec.from_seconds(args.chunk_size, args.lookahead or 0.0, frame_ms)


def _merge_config(args, keys: dict) -> dict:
    """File values < flag values; returns plain dict of resolved settings."""
    resolved = {}
    file_values = dataio.read_config_file(args.config) if getattr(args, "config", None) else {}
    for key, (flag_value, convert, default) in keys.items():
        if flag_value is not None:
            resolved[key] = flag_value
        elif key in file_values:
            try:
                resolved[key] = convert(file_values[key])
            except ValueError as e:
                raise ConfigError(f"config key {key}: {e}") from e
        else:
            resolved[key] = default
    return resolved


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    task = synthetic.SyntheticTask(
        vocab_size=args.vocab_size,
        feat_dim=args.feat_dim,
        frame_ms=args.frame_ms,
        min_words=args.min_words,
        max_words=args.max_words,
        noise=args.noise,
        utts_per_recording=args.utts_per_recording,
    )
    _log_resolved("gen", {**dataclasses.asdict(task), "utts": args.utts, "seed": args.seed})
    out = Path(args.out)
    utts = synthetic.gen_dataset(task, args.utts, args.seed)
    vocab = task.vocab()
    synthetic.write_dataset(utts, vocab, out)

    # External LM text comes from held-out indices; the internal-LM estimate
    # trains on the emitted transcripts themselves.
    lm_utts = synthetic.gen_dataset(task, 4 * args.utts, args.seed, start_index=10**6)
    lm = NGramLM(vocab.size, order=args.lm_order).train(
        [vocab.encode(u.transcript) for u in lm_utts]
    )
    write_arpa(lm, out / "lm.arpa", vocab.tokens)
    ilm = NGramLM(vocab.size, order=args.lm_order).train(
        [vocab.encode(u.transcript) for u in utts]
    )
    write_arpa(ilm, out / "ilm.arpa", vocab.tokens)
    log.info("wrote %d utterances under %s", len(utts), out)
    return 0


def _load_vocab_and_data(args):
    vocab = Vocab.load(args.vocab)
    utts = dataio.load_dataset(args.manifest)
    if not utts:
        raise DataError(f"empty manifest: {args.manifest}")
    return vocab, utts


def cmd_train(args) -> int:
    vocab, utts = _load_vocab_and_data(args)
    frame_ms = utts[0].frame_ms
    feat_dim = utts[0].features.shape[1]
    settings = _merge_config(
        args,
        {
            "epochs": (args.epochs, int, 10),
            "batch_size": (args.batch_size, int, 8),
            "peak_lr": (args.lr, float, 1e-3),
            "warmup_steps": (args.warmup, int, 100),
            "ctc_aux_weight": (args.ctc_weight, float, 0.3),
            "seed": (args.seed, int, 0),
            "model_dim": (args.enc_dim, int, 64),
            "layers": (args.enc_layers, int, 2),
            "heads": (args.enc_heads, int, 4),
            "ff_dim": (args.enc_ff, int, 128),
            "downsample_factor": (args.downsample, int, 6),
            "embed_dim": (args.embed_dim, int, 64),
            "lstm_dim": (args.lstm_dim, int, 64),
        },
    )
    train_cfg = TrainConfig(
        epochs=settings["epochs"],
        batch_size=settings["batch_size"],
        peak_lr=settings["peak_lr"],
        warmup_steps=settings["warmup_steps"],
        ctc_aux_weight=settings["ctc_aux_weight"],
        seed=settings["seed"],
    )
    spec = _chunk_spec(args, frame_ms)
    if args.stage == "global":
        if spec is not None or args.init or args.align:
            raise ConfigError("global stage takes no chunk geometry, --init, or --align")
        enc_cfg = EncoderConfig(
            feat_dim=feat_dim,
            model_dim=settings["model_dim"],
            layers=settings["layers"],
            heads=settings["heads"],
            ff_dim=settings["ff_dim"],
            downsample_factor=settings["downsample_factor"],
        )
        dec_cfg = DecoderConfig(
            vocab_size=vocab.size,
            enc_dim=enc_cfg.model_dim,
            embed_dim=settings["embed_dim"],
            lstm_dim=settings["lstm_dim"],
            mode="global",
        )
        model = Model(ModelConfig(encoder=enc_cfg, decoder=dec_cfg), seed=train_cfg.seed)
        alignments = None
    else:
        if not args.init:
            raise ConfigError("chunked stage requires --init with the global checkpoint")
        if not args.align:
            raise ConfigError("chunked stage requires --align with chunkwise alignments")
        if spec is None:
            raise ConfigError("chunked stage requires --chunk-size")
        base = Model.load(args.init)
        enc_cfg = dataclasses.replace(
            base.config.encoder, chunk=spec, carry_over_chunks=args.carry_over or 0
        )
        dec_cfg = dataclasses.replace(base.config.decoder, mode="chunked")
        model = Model(ModelConfig(encoder=enc_cfg, decoder=dec_cfg), seed=train_cfg.seed)
        model.init_from(base)
        alignments = {a.utt_id: a for a in dataio.read_chunkwise_alignments(args.align)}

    _log_resolved("train", {**settings, "stage": args.stage})
    rows = train_stage(model, utts, vocab, train_cfg, args.stage, alignments=alignments)
    out = Path(args.out)
    model.save(out)
    dataio.write_loss_log(out / "loss.csv", rows)
    log.info("checkpoint written to %s (final loss %.4f)", out, rows[-1][2])
    return 0


def cmd_align(args) -> int:
    vocab, utts = _load_vocab_and_data(args)
    model = Model.load(args.ckpt)
    spec = _chunk_spec(args, utts[0].frame_ms)
    if spec is None:
        raise ConfigError("alignment extraction requires --chunk-size")
    _log_resolved("align", {"ckpt": args.ckpt, "chunk": dataclasses.asdict(spec)})
    alignments = extract_chunkwise_alignments(model, utts, vocab, spec)
    dataio.write_chunkwise_alignments(args.out, alignments)
    log.info("wrote %d alignments to %s", len(alignments), args.out)
    return 0


def _decode_one(model: Model, vocab: Vocab, utt, beam_cfg: BeamConfig, chunked: bool, lm, ilm):
    enc_out = (
        model.encoder.encode_chunked(utt.features)
        if chunked
        else model.encoder.encode_global(utt.features)
    )
    cap = max(beam_cfg.max_symbols, 6 * enc_out.num_chunks + 60)
    cfg = dataclasses.replace(beam_cfg, max_symbols=cap)
    if cfg.beam_size == 1 and cfg.fusion is None:
        hyp, truncated = greedy_decode(model.decoder, enc_out, max_symbols=cap)
        if truncated:
            raise SearchError(f"{utt.utt_id}: no complete hypothesis within {cap} symbols", hyp)
    else:
        hyp = beam_search(model.decoder, enc_out, cfg, lm=lm, ilm=ilm)[0]
    eoc = model.config.decoder.eoc_id
    return {
        "id": utt.utt_id,
        "tokens": vocab.decode(hyp.label_ids(eoc)),
        "score": hyp.score,
        "emit_chunks": hyp.label_emit_chunks(eoc),
    }


def _run_decode(model, vocab, utts, args) -> list[dict]:
    frame_ms = utts[0].frame_ms
    spec = _chunk_spec(args, frame_ms)
    if spec is not None:
        enc_cfg = dataclasses.replace(
            model.config.encoder, chunk=spec, carry_over_chunks=args.carry_over or 0
        )
        model = Model(
            ModelConfig(encoder=enc_cfg, decoder=model.config.decoder), params=model.params
        )
    chunked = model.config.encoder.chunk is not None
    fusion = None
    lm = ilm = None
    if args.lm:
        fusion = FusionConfig(beta=args.beta, lam=args.lam)
        lm = read_arpa(args.lm, vocab.tokens)
        if args.ilm:
            ilm = read_arpa(args.ilm, vocab.tokens)
        elif args.lam > 0:
            raise ConfigError("--lambda > 0 requires --ilm")
    elif args.beta or args.lam:
        raise ConfigError("--beta/--lambda require --lm")
    beam_cfg = BeamConfig(
        beam_size=args.beam,
        length_norm=args.length_norm,
        max_symbols=args.max_symbols,
        fusion=fusion,
    )
    jobs = _jobs(args.jobs)
    if jobs == 1:
        return [_decode_one(model, vocab, u, beam_cfg, chunked, lm, ilm) for u in utts]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda u: _decode_one(model, vocab, u, beam_cfg, chunked, lm, ilm), utts))


def _write_report_maybe(args, utts, records, latency=None) -> None:
    if not getattr(args, "report", None):
        return
    by_id = {u.utt_id: u for u in utts}
    pairs = [(by_id[r["id"]].transcript, r["tokens"]) for r in records]
    rate, counts = metrics.corpus_wer(pairs)
    dataio.write_report(args.report, rate, counts, latency=latency)
    log.info("WER %.4f (S=%d D=%d I=%d)", rate, counts.substitutions, counts.deletions, counts.insertions)


def cmd_decode(args) -> int:
    vocab, utts = _load_vocab_and_data(args)
    model = Model.load(args.ckpt)
    _log_resolved(
        "decode",
        {
            "ckpt": args.ckpt,
            "beam": args.beam,
            "length_norm": args.length_norm,
            "lm": args.lm,
            "ilm": args.ilm,
            "beta": args.beta,
            "lambda": args.lam,
            "chunk_size": args.chunk_size,
            "lookahead": args.lookahead,
            "carry_over": args.carry_over,
        },
    )
    records = _run_decode(model, vocab, utts, args)
    dataio.write_decodes(args.out, records)
    _write_report_maybe(args, utts, records)
    return 0


def cmd_latency(args) -> int:
    vocab, utts = _load_vocab_and_data(args)
    records = dataio.read_decodes(args.decodes)
    spec = _chunk_spec(args, utts[0].frame_ms)
    if spec is None:
        raise ConfigError("latency needs the decode-time --chunk-size/--lookahead")
    by_id = {u.utt_id: u for u in utts}
    samples = []
    for r in records:
        utt = by_id.get(r["id"])
        if utt is None:
            raise DataError(f"decode entry {r['id']!r} not present in the manifest")
        if utt.word_end_s is None:
            raise DataError(f"utterance {r['id']!r} carries no reference word end times")
        samples.extend(
            metrics.latency_samples(
                utt.transcript,
                utt.word_end_s,
                r["tokens"],
                r["emit_chunks"],
                spec,
                include_lookahead=not args.exclude_lookahead,
            )
        )
    p50, p95, p99 = metrics.latency_percentiles([s.latency for s in samples])
    log.info("latency over %d matched words: p50=%.3f p95=%.3f p99=%.3f", len(samples), p50, p95, p99)
    _write_report_maybe(args, utts, records, latency=(p50, p95, p99))
    if not getattr(args, "report", None):
        print(json.dumps({"p50": p50, "p95": p95, "p99": p99}))
    return 0


def cmd_longform(args) -> int:
    vocab, utts = _load_vocab_and_data(args)
    model = Model.load(args.ckpt)
    merged = metrics.concat_longform(utts, args.concat)
    log.info("long-form: %d utterances -> %d groups at C=%d", len(utts), len(merged), args.concat)
    records = _run_decode(model, vocab, merged, args)
    dataio.write_decodes(args.out, records)
    _write_report_maybe(args, merged, records)
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_common_decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beam", type=int, default=12)
    p.add_argument("--greedy", action="store_true", help="shorthand for --beam 1")
    p.add_argument("--length-norm", action="store_true")
    p.add_argument("--max-symbols", type=int, default=200)
    p.add_argument("--lm", help="ARPA file for shallow fusion")
    p.add_argument("--ilm", help="ARPA file with the internal-LM estimate")
    p.add_argument("--beta", type=float, default=0.0, help="external LM scale")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0, help="internal LM scale")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--report", help="write a WER report JSON here")
    _add_chunk_flags(p)


def _add_chunk_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--chunk-size", type=float, help="chunk center size in seconds")
    p.add_argument("--lookahead", type=float, help="right context in seconds")
    p.add_argument("--carry-over", type=int, help="history chunks visible as keys")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chunkstream")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int, default=10)
    p.add_argument("--utts", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feat-dim", type=int, default=16)
    p.add_argument("--frame-ms", type=int, default=10)
    p.add_argument("--min-words", type=int, default=3)
    p.add_argument("--max-words", type=int, default=12)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--utts-per-recording", type=int, default=8)
    p.add_argument("--lm-order", type=int, default=2)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=["global", "chunked"], required=True)
    p.add_argument("--init", help="checkpoint to initialise from (chunked stage)")
    p.add_argument("--align", help="chunkwise alignment JSONL (chunked stage)")
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--ctc-weight", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--enc-dim", type=int)
    p.add_argument("--enc-layers", type=int)
    p.add_argument("--enc-heads", type=int)
    p.add_argument("--enc-ff", type=int)
    p.add_argument("--downsample", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--lstm-dim", type=int)
    _add_chunk_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("align", help="extract chunkwise alignments via CTC")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    _add_chunk_flags(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("decode", help="decode a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    _add_common_decode_flags(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("latency", help="word-emission latency percentiles")
    p.add_argument("--decodes", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--exclude-lookahead", action="store_true")
    p.add_argument("--report")
    _add_chunk_flags(p)
    p.set_defaults(func=cmd_latency)

    p = sub.add_parser("longform", help="decode concatenated long-form groups")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--concat", "--C", dest="concat", type=int, required=True)
    _add_common_decode_flags(p)
    p.set_defaults(func=cmd_longform)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    if getattr(args, "greedy", False):
        args.beam = 1
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("%s", e)
        return 2
    except (DataError, OSError) as e:
        log.error("%s", e)
        return 3
    except (NumericalError, SearchError) as e:
        log.error("%s", e)
        return 4
    except ChunkstreamError as e:
        log.error("%s", e)
        return 4


if __name__ == "__main__":
    sys.exit(main())
