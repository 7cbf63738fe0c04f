"""Batch command-line frontend.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal
invariant violation. ``TEMPLAR_THREADS`` caps per-media parallelism.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import embed_train, featnet, landmarks, pyramid_detect, template_eval
from .config import PipelineConfig, load_config
from .errors import (
    ConfigError,
    ConsistencyError,
    DataError,
    InsufficientClasses,
    InsufficientData,
    InvariantViolation,
    ShapeMismatch,
    TemplarError,
)
from .geom_align import CANONICAL_SIZE, align_face
from .store import (
    DescriptorStore,
    ProtocolRow,
    ProtocolTable,
    atomic_write_text,
    parse_pairs,
    parse_protocol,
    read_pnm,
    store_read,
    store_write,
    write_protocol,
)

log = logging.getLogger("templar")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def n_threads() -> int:
    raw = os.environ.get("TEMPLAR_THREADS", "")
    try:
        return max(1, int(raw)) if raw else max(1, os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"TEMPLAR_THREADS must be an integer, got {raw!r}") from None


def _ordered_map(fn, items):
    # Executor.map preserves input order, so output is schedule-independent.
    workers = n_threads()
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _require(path, what) -> Path:
    if path is None:
        raise ConfigError(f"missing {what} (flag or config paths entry)")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_image(images_dir: Path, media_path: str):
    return read_pnm(images_dir / media_path)


# -- commands ----------------------------------------------------------------


def cmd_align(args, cfg: PipelineConfig) -> int:
    protocol = parse_protocol(_require(args.protocol, "protocol"))
    images = _require(args.images, "images directory")
    out = Path(args.out)
    media = {}
    for row in protocol.rows:
        media.setdefault(row.media_path, row.landmarks)

    def work(item):
        mpath, lm = item
        if lm is None:
            return mpath, None, "no landmarks"
        try:
            img = _load_image(images, mpath)
            face = align_face(img, lm, cfg.canonical, source_id=mpath)
        except (OSError, DataError, ValueError) as exc:
            return mpath, None, f"{type(exc).__name__}: {exc}"
        return mpath, face.pixels.ravel(), None

    store = DescriptorStore(dim=CANONICAL_SIZE * CANONICAL_SIZE * 3)
    failures = []
    for mpath, vec, reason in _ordered_map(work, list(media.items())):
        if vec is None:
            log.warning("align: %s unprocessable (%s)", mpath, reason)
            failures.append((mpath, reason))
        else:
            store.add(mpath, vec)
    store_write(store, out / "aligned.tmpl")
    atomic_write_text(out / "align_failures.csv", _csv_text(["media_path", "reason"], failures))
    log.info("aligned %d media, %d unprocessable", len(store), len(failures))
    return EXIT_OK


def _net(cfg: PipelineConfig, weights_path):
    spec = cfg.net_spec()
    return featnet.load_weights(_require(weights_path, "weights"), spec, cfg.net_input)


def cmd_extract(args, cfg: PipelineConfig) -> int:
    net = _net(cfg, args.weights or cfg.paths.get("weights"))
    faces = store_read(_require(args.store or cfg.paths.get("store"), "aligned store"))
    shape = tuple(cfg.net_input)
    if faces.dim != int(np.prod(shape)):
        raise ShapeMismatch(f"aligned store dim {faces.dim} does not match net input {shape}")
    ids = faces.ids()
    outs = _ordered_map(lambda mid: net.forward(faces[mid].reshape(shape)), ids)
    dim = outs[0].shape[0] if outs else featnet.validate_spec(net.spec, shape)[-1][0]
    store = DescriptorStore(dim=dim)
    for mid, vec in zip(ids, outs):
        if not np.all(np.isfinite(vec)):
            raise InvariantViolation(f"non-finite descriptor for {mid}")
        store.add(mid, vec)
    store_write(store, Path(args.out) / "descriptors.tmpl")
    log.info("extracted %d descriptors of dim %d", len(store), dim)
    return EXIT_OK


def _labeled_matrix(store: DescriptorStore, protocol: ProtocolTable):
    seen = {}
    for row in protocol.rows:
        if row.media_path in store and row.media_path not in seen:
            seen[row.media_path] = row.subject_id
    if not seen:
        raise InsufficientClasses("no protocol media found in the descriptor store")
    X = np.stack([store[m] for m in seen])
    return X, list(seen.values())


def cmd_train_embedding(args, cfg: PipelineConfig) -> int:
    store = store_read(_require(args.store or cfg.paths.get("store"), "descriptor store"))
    protocol = parse_protocol(_require(args.protocol or cfg.paths.get("protocol"), "protocol"))
    X, labels = _labeled_matrix(store, protocol)
    tcfg = cfg.train_config()
    trace = []
    W = embed_train.train_embedding(X, labels, tcfg, loss_trace=trace)
    if not np.all(np.isfinite(W)):
        raise InvariantViolation("training produced non-finite W")
    out = Path(args.out)
    embed_train.save_embedding(W, out / "embedding.tmpl")
    atomic_write_text(out / "loss.csv", _csv_text(["epoch", "mean_loss"], [(e, repr(v)) for e, v in trace]))
    log.info("trained W %s on %d descriptors, %d epochs", W.shape, len(labels), tcfg.epochs)
    return EXIT_OK


def _templates(table: ProtocolTable, store: DescriptorStore) -> dict:
    out = {}
    for tid, rows in table.templates().items():
        media = [store[r.media_path] for r in rows if r.media_path in store]
        out[tid] = template_eval.Template(tid, rows[0].subject_id, media)
    return out


def evaluate_split(split_dir: Path, store: DescriptorStore, W, policy, pooling="mean") -> dict:
    """Run whichever of verification / identification the split directory defines."""
    result = {}
    verify, pairs = split_dir / "verify.csv", split_dir / "pairs.csv"
    if verify.exists() and pairs.exists():
        temps = _templates(parse_protocol(verify), store)
        triples = []
        for a, b in parse_pairs(pairs):
            missing = [t for t in (a, b) if t not in temps]
            if missing:
                raise ConsistencyError(f"pair references unknown template(s) {missing}", template_id=missing[0])
            triples.append((temps[a], temps[b], temps[a].subject_id == temps[b].subject_id))
        result["verification"] = template_eval.eval_verification(triples, W, policy, pooling=pooling)
    gallery, probe = split_dir / "gallery.csv", split_dir / "probe.csv"
    if gallery.exists() and probe.exists():
        g = list(_templates(parse_protocol(gallery), store).values())
        p = list(_templates(parse_protocol(probe), store).values())
        result["identification"] = template_eval.eval_identification(p, g, W, policy, pooling=pooling)
    if not result:
        raise ConfigError(f"{split_dir}: needs verify.csv+pairs.csv and/or gallery.csv+probe.csv")
    _check_report_invariants(result)
    return result


def _check_report_invariants(result):
    v = result.get("verification")
    if v is not None:
        tars = [t for _, t in v.roc]
        fars = [f for f, _ in v.roc]
        if any(b < a for a, b in zip(tars, tars[1:])) or any(b < a for a, b in zip(fars, fars[1:])):
            raise InvariantViolation("ROC is not monotone")
    i = result.get("identification")
    if i is not None and any(b < a for a, b in zip(i.cmc, i.cmc[1:])):
        raise InvariantViolation("CMC is not monotone")


def _write_split_outputs(out: Path, result: dict, policy, split: str):
    report = {"policy": policy.value, "split": split}
    for key, rep in result.items():
        report[key] = rep.to_dict()
    atomic_write_text(out / "report.json", _json_text(report))
    if "verification" in result:
        rows = [(repr(f), repr(t)) for f, t in result["verification"].roc]
        atomic_write_text(out / "roc.csv", _csv_text(["far", "tar"], rows))
    if "identification" in result:
        rows = [(k + 1, repr(a)) for k, a in enumerate(result["identification"].cmc)]
        atomic_write_text(out / "cmc.csv", _csv_text(["rank", "accuracy"], rows))


def _metrics(result: dict) -> dict:
    m = {}
    for rep in result.values():
        m.update(rep.metrics())
    return m


def cmd_eval(args, cfg: PipelineConfig) -> int:
    root = _require(args.protocol or cfg.paths.get("protocol"), "protocol directory")
    store = store_read(_require(args.store or cfg.paths.get("store"), "descriptor store"))
    emb = args.embedding or cfg.paths.get("embedding")
    policy = cfg.policy
    out = Path(args.out)

    def load_W(split_name):
        if emb is None:
            return None
        return embed_train.load_embedding(_require(emb.replace("{split}", split_name), "embedding"))

    if not args.splits:
        result = evaluate_split(root, store, load_W(root.name), policy, cfg.eval.pooling)
        _write_split_outputs(out, result, policy, root.name)
        log.info("eval %s: %s", root.name, _metrics(result))
        return EXIT_OK
    names = [f"split{k}" for k in range(1, args.splits + 1)]
    for name in names:
        _require(root / name, f"split directory {name}")
    per_split = []
    for name in names:
        result = evaluate_split(root / name, store, load_W(name), policy, cfg.eval.pooling)
        _write_split_outputs(out / name, result, policy, name)
        per_split.append(_metrics(result))
    summary = template_eval.aggregate_splits(per_split)
    atomic_write_text(out / "summary.json", _json_text({"policy": policy.value, **summary.to_dict()}))
    rows = [(k, repr(summary.mean[k]), repr(summary.std[k])) for k in summary.mean]
    atomic_write_text(out / "summary.csv", _csv_text(["metric", "mean", "std"], rows))
    log.info("eval over %d splits: %s", len(names), summary.mean)
    return EXIT_OK


def cmd_landmark(args, cfg: PipelineConfig) -> int:
    protocol = parse_protocol(_require(args.protocol or cfg.paths.get("protocol"), "protocol"))
    images = _require(args.images or cfg.paths.get("images"), "images directory")
    out = Path(args.out)
    lc = cfg.landmarks
    if args.mode == "train":
        media = {}
        for row in protocol.rows:
            if row.landmarks is not None:
                media.setdefault(row.media_path, row.landmarks)
        if not media:
            raise InsufficientData("protocol has no landmark annotations")
        imgs = [_load_image(images, m) for m in media]
        history = []
        model = landmarks.cascade_train(
            imgs, list(media.values()), lc.n_stages, lc.patch_radius, lc.feature_fn, lc.ridge_lambda, history
        )
        if any(b > a + 1e-9 for a, b in zip(history, history[1:])):
            raise InvariantViolation(f"cascade training error increased: {history}")
        landmarks.save_cascade(model, out / "cascade.tmpl")
        atomic_write_text(
            out / "cascade_train.csv", _csv_text(["stage", "rms_error"], [(i, repr(e)) for i, e in enumerate(history)])
        )
        return EXIT_OK
    model = landmarks.load_cascade(_require(args.model or cfg.paths.get("cascade"), "cascade model"))
    predicted = {}
    rows = []
    for row in protocol.rows:
        if row.media_path not in predicted:
            try:
                shape = landmarks.cascade_predict(model, _load_image(images, row.media_path))
                predicted[row.media_path] = tuple((float(x), float(y)) for x, y in shape[:3])
            except (OSError, DataError) as exc:
                log.warning("landmark: %s unprocessable (%s)", row.media_path, exc)
                predicted[row.media_path] = None
        rows.append(ProtocolRow(row.template_id, row.subject_id, row.media_path, predicted[row.media_path]))
    write_protocol(ProtocolTable(rows, protocol.split_id), out / "landmarks.csv")
    return EXIT_OK


def cmd_detect(args, cfg: PipelineConfig) -> int:
    scorer = pyramid_detect.load_scorer(_require(args.scorer or cfg.paths.get("scorer"), "scorer"))
    feats = {
        "gradient": pyramid_detect.gradient_histogram_features,
        "identity": pyramid_detect.identity_features,
    }.get(cfg.detect.features)
    if feats is None:
        raise ConfigError(f"detect.features must be 'gradient' or 'identity', got {cfg.detect.features!r}")
    rows, levels = [], {}
    for path in args.images:
        img = read_pnm(_require(path, "image"))
        pyr, boxes = pyramid_detect.detect(img, scorer, feats, cfg.detect.iou_threshold, cfg.detect.min_score)
        if len(pyr) != pyramid_detect.N_LEVELS:
            raise InvariantViolation(f"pyramid has {len(pyr)} levels")
        levels[str(path)] = [list(lvl.shape[:2]) for lvl in pyr.levels]
        rows += [(str(path), repr(b.x), repr(b.y), repr(b.w), repr(b.h), repr(b.score), b.level) for b in boxes]
    out = Path(args.out)
    atomic_write_text(out / "detections.csv", _csv_text(["image", "x", "y", "w", "h", "score", "level"], rows))
    atomic_write_text(out / "pyramid.json", _json_text(levels))
    return EXIT_OK


def cmd_init_weights(args, cfg: PipelineConfig) -> int:
    """Seeded random weights for the configured net (the net itself is never trained here)."""
    net = featnet.Network.random(cfg.net_spec(), np.random.default_rng(cfg.seed), cfg.net_input)
    featnet.save_weights(net, Path(args.out) / "weights.tmpl")
    return EXIT_OK


def cmd_validate_net(args, cfg: PipelineConfig) -> int:
    spec = cfg.net_spec()
    trace = featnet.validate_spec(spec, cfg.net_input)
    for layer, shape in zip(spec.lines(), trace):
        print(f"{layer:<20s} -> {'x'.join(map(str, shape))}")
    print(json.dumps(spec.counts(), sort_keys=True))
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline YAML config")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--policy", choices=["setup1", "setup2"], help="unprocessable-template policy")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="templar", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("align", parents=[common], help="align protocol media into the canonical frame")
    s.add_argument("--protocol")
    s.add_argument("--images")
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("extract", parents=[common], help="run the descriptor network over an aligned store")
    s.add_argument("--store")
    s.add_argument("--weights")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train-embedding", parents=[common], help="learn the triplet embedding W")
    s.add_argument("--store")
    s.add_argument("--protocol")
    s.set_defaults(func=cmd_train_embedding)

    s = sub.add_parser("eval", parents=[common], help="verification / identification evaluation")
    s.add_argument("--protocol", help="split directory, or parent of split1..splitN with --splits")
    s.add_argument("--store")
    s.add_argument("--embedding", help="embedding file; '{split}' is replaced by the split name")
    s.add_argument("--splits", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("landmark", parents=[common], help="train or apply the cascade landmark model")
    s.add_argument("mode", choices=["train", "predict"])
    s.add_argument("--protocol")
    s.add_argument("--images")
    s.add_argument("--model")
    s.set_defaults(func=cmd_landmark)

    s = sub.add_parser("detect", parents=[common], help="pyramid sliding-window detection")
    s.add_argument("images", nargs="+")
    s.add_argument("--scorer")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("init-weights", parents=[common], help="write seeded random weights for the net")
    s.set_defaults(func=cmd_init_weights)

    s = sub.add_parser("validate-net", parents=[common], help="print the layer-by-layer shape trace")
    s.set_defaults(func=cmd_validate_net)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.train = cfg.train_config(args.seed)
        if args.policy:
            cfg.policy = template_eval.SetupPolicy.parse(args.policy)
        if args.out is None:
            if args.func not in (cmd_validate_net,):
                raise ConfigError("--out is required")
        return args.func(args, cfg)
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_USAGE
    except InvariantViolation as exc:
        log.error("invariant violated: %s", exc)
        return EXIT_INTERNAL
    except (DataError, TemplarError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_DATA
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
