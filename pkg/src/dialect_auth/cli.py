"""``dialect-auth`` command-line entry point."""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ddm, srv
from .datasets import (
    CorpusConfig,
    gen_http_corpus,
    gen_request_corpus,
    gen_srv_dataset,
    gen_topic_corpus,
    read_srv_csv,
    write_srv_csv,
)
from .dialects import register_ftp_dialects
from .errors import DialectAuthError
from .io import atomic_write_text

log = logging.getLogger("dialect_auth")

PROTOCOLS = ("ftp", "mqtt", "http")
N_DIALECTS = {"ftp": 15, "mqtt": 3, "http": 2}
DEFAULTS = {
    "host": "127.0.0.1",
    "ftp_port": "2121",
    "http_port": "8080",
    "mqtt_port": "1884",
    "d7_delay": "4.0",
    "response_timeout": "10.0",
}


def load_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Keys are lower-cased."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    cp.optionxform = str.lower
    cp.read_string("[config]\n" + Path(path).read_text(encoding="utf-8"))
    return dict(cp["config"])


def cost_overrides(cfg: dict[str, str]) -> dict[int, float]:
    """``cost.<id> = <value>`` entries."""
    return {int(k.split(".", 1)[1]): float(v) for k, v in cfg.items() if k.startswith("cost.")}


class Context:
    def __init__(self, args):
        self.args = args
        self.cfg = dict(DEFAULTS)
        if args.config:
            self.cfg.update(load_config(args.config))

    def get(self, name: str, key: str | None = None, default=None):
        """Command-line value if given, else the config file, else ``default``."""
        v = getattr(self.args, name, None)
        if v is not None:
            return v
        return self.cfg.get(key or name, default)

    def registry(self):
        return register_ftp_dialects(float(self.get("d7_delay")), cost_overrides(self.cfg) or None)

    def credentials(self):
        user, pw = self.get("user"), self.get("password")
        return (user, pw) if user is not None else None

    def model(self, protocol: str = "ftp"):
        key = "model" if protocol == "ftp" else f"{protocol}_model"
        path = self.get("model", key)
        if path is None:
            raise SystemExit(f"no model given (--model or '{key}' in the config file)")
        return ddm.read_model(path)

    def tree(self, protocol: str = "ftp"):
        key = "tree" if protocol == "ftp" else f"{protocol}_tree"
        path = self.get("tree", key)
        if path is None:
            raise SystemExit(f"no tree given (--tree or '{key}' in the config file)")
        return srv.read_tree(path)


# ------------------------------------------------------------------ commands


def cmd_gen_datasets(ctx: Context) -> int:
    a = ctx.args
    out = Path(a.out)
    corpus = CorpusConfig(size=a.size, seed=a.seed, words_path=a.words)
    gen = {"ftp": gen_request_corpus, "mqtt": gen_topic_corpus, "http": gen_http_corpus}[a.protocol]
    atomic_write_text(out / f"{a.protocol}_requests.txt", "\n".join(gen(corpus)) + "\n")
    if a.protocol == "ftp":
        x, y = gen_srv_dataset(ctx.registry(), a.srv_size, a.seed)
        atomic_write_text(out / "ftp_srv.csv", write_srv_csv(x, y))
    elif a.protocol == "mqtt":
        from .adapters.mqtt import gen_mqtt_srv_dataset

        x, y = gen_mqtt_srv_dataset(a.srv_size, a.seed)
        atomic_write_text(out / "mqtt_srv.csv", write_srv_csv(x, y))
    print(f"wrote datasets to {out}")
    return 0


def cmd_train_ddm(ctx: Context) -> int:
    from .sweep import desk_config, sweep_costs

    a = ctx.args
    if a.requests:
        requests = [r for r in Path(a.requests).read_text(encoding="utf-8").splitlines() if r.strip()]
    else:
        gen = {"ftp": gen_request_corpus, "mqtt": gen_topic_corpus, "http": gen_http_corpus}[a.protocol]
        requests = gen(CorpusConfig(size=a.size, seed=a.seed, words_path=a.words))
    m = N_DIALECTS[a.protocol]
    if a.costs:
        costs = [float(c) for c in a.costs.split(",")]
    elif a.protocol == "ftp":
        costs = ctx.registry().costs if a.profile == "reference" else sweep_costs(ctx.registry())
    else:
        costs = [0.0] * m
    overrides = {
        k: v
        for k, v in {
            "learning_rate": a.lr,
            "batch_size": a.batch_size,
            "epochs": a.epochs,
            "confidence_weight": a.confidence_weight,
            "confidence_warmup": a.confidence_warmup,
        }.items()
        if v is not None
    }
    if a.profile == "reference":
        config = ddm.TrainingConfig(trade_off_a=a.a, seed=a.seed, costs=costs, **overrides)
    else:
        config = desk_config(a.a, a.seed, costs, **overrides)
    model = ddm.train(requests, config, n_dialects=m)
    ddm.write_model(model, a.out)
    hist = ddm.dialect_histogram(model, requests[: min(len(requests), 10_000)])
    print(f"wrote {a.out}; prediction share per dialect: {np.round(hist / hist.sum(), 3).tolist()}")
    return 0


def cmd_train_srv(ctx: Context) -> int:
    a = ctx.args
    if a.dataset:
        x, y = read_srv_csv(a.dataset)
    elif a.protocol == "mqtt":
        from .adapters.mqtt import gen_mqtt_srv_dataset

        x, y = gen_mqtt_srv_dataset(a.size, a.seed)
    else:
        x, y = gen_srv_dataset(ctx.registry(), a.size, a.seed)
    order = np.random.default_rng(a.seed).permutation(len(y))
    cut = int(0.8 * len(y))
    tree = srv.train_tree(x[order[:cut]], y[order[:cut]], max_depth=a.max_depth)
    acc = srv.tree_accuracy(tree, x[order[cut:]], y[order[cut:]]) if cut < len(y) else float("nan")
    srv.write_tree(tree, a.out)
    print(f"wrote {a.out}: {len(tree)} nodes, depth {tree.depth}, held-out accuracy {acc:.4f}")
    return 0


def cmd_serve_ftp(ctx: Context) -> int:
    from .ftp import DialectResponder, FtpServer

    server = FtpServer(
        DialectResponder(ctx.registry(), ctx.model("ftp")),
        ctx.get("root", "file_root", "."),
        ctx.get("host"),
        int(ctx.get("port", "ftp_port")),
        ctx.credentials(),
    )
    print(f"serving ftp on {server.address[0]}:{server.address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server._server.server_close()
    return 0


def cmd_ftp_get(ctx: Context) -> int:
    from .ftp import FtpClient

    user, pw = (ctx.credentials() or (None, None))
    plain = ctx.args.plain
    client = FtpClient(
        (ctx.get("host"), int(ctx.get("port", "ftp_port"))),
        ctx.registry(),
        None if plain else ctx.model("ftp"),
        None if plain else ctx.tree("ftp"),
        user=user,
        password=pw,
        response_timeout=float(ctx.get("response_timeout")),
        verify=not plain,
        fixed_dialect=8 if plain else ctx.args.pin_dialect,
        time_model=ctx.args.pin_dialect is not None and not plain,
    )
    status = 0
    with client:
        for request in ctx.args.request:
            res = client.get(request)
            print(f"{request}: dialect {res.dialect} -> {res.status}" + (f" ({res.reason})" if res.reason else ""))
            if ctx.args.transcript:
                with open(ctx.args.transcript, "a", encoding="utf-8") as f:
                    f.write(res.transcript.to_jsonl())
            if res.ok and ctx.args.out:
                from .io import atomic_write_bytes

                dest = Path(ctx.args.out)
                if dest.is_dir() or len(ctx.args.request) > 1:
                    dest = dest / request.split(" ", 1)[1]
                atomic_write_bytes(dest, res.data)
            if res.terminated:
                status = 2
                break
    return status


def cmd_serve_http(ctx: Context) -> int:
    from .adapters.http import HttpServer, dialect_responder

    server = HttpServer(
        dialect_responder(ctx.model("http")),
        ctx.get("root", "file_root", "."),
        ctx.get("host"),
        int(ctx.get("port", "http_port")),
    )
    print(f"serving http on {server.address[0]}:{server.address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server._server.server_close()
    return 0


def cmd_http_get(ctx: Context) -> int:
    from .adapters.http import http_get

    res = http_get(
        (ctx.get("host"), int(ctx.get("port", "http_port"))),
        ctx.args.path,
        ctx.model("http"),
        timeout=float(ctx.get("response_timeout")),
    )
    print(f"GET {ctx.args.path}: dialect {res.dialect} -> {res.status}" + (f" ({res.reason})" if res.reason else ""))
    if res.ok and ctx.args.out:
        from .io import atomic_write_bytes

        atomic_write_bytes(ctx.args.out, res.body)
    return 0 if res.status != "terminated" else 2


def cmd_mqtt_broker(ctx: Context) -> int:
    from .adapters.mqtt import MqttBroker

    broker = MqttBroker(ctx.model("mqtt"), ctx.tree("mqtt"), ctx.get("host"), int(ctx.get("port", "mqtt_port")))
    print(f"mqtt broker on {broker.address[0]}:{broker.address[1]}", flush=True)
    try:
        broker.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        broker._server.server_close()
    return 0


def cmd_mqtt_pub(ctx: Context) -> int:
    from .adapters.mqtt import MqttClient

    with MqttClient((ctx.get("host"), int(ctx.get("port", "mqtt_port"))), ctx.model("mqtt")) as c:
        ok = c.publish(ctx.args.topic, ctx.args.message)
    print("acknowledged" if ok else "rejected")
    return 0 if ok else 2


def cmd_attack(ctx: Context) -> int:
    from .attacks import AttackScenario, run_flood, run_replay, run_reroute

    a = ctx.args
    kind = {"reroute": "Reroute", "replay": "Replay", "flood": "FloodPublish"}[a.kind]
    scenario = AttackScenario(
        kind,
        trials=a.trials,
        seed=a.seed,
        target=a.target,
        strategy=a.strategy,
        response_timeout=a.response_timeout,
        exact_replay_trials=a.exact_replay_trials,
        genuine_trials=a.genuine_trials,
    )
    if a.kind == "flood":
        report = run_flood(scenario, ctx.model("mqtt"), ctx.tree("mqtt"))
    elif a.kind == "replay":
        report = run_replay(scenario, ctx.model("ftp"), ctx.tree("ftp"))
    else:
        report = run_reroute(scenario, ctx.model("ftp"), ctx.tree("ftp"))
    print(report.to_table())
    if a.json:
        atomic_write_text(a.json, report.to_json() + "\n")
    return 0


def cmd_sweep_tradeoff(ctx: Context) -> int:
    from .sweep import distribution_csv, distribution_svg, sweep_tradeoff

    a = ctx.args
    a_values = [float(v) for v in a.a_values.split(",")]
    if any(not 0 <= v <= 1 for v in a_values):
        raise SystemExit("a values must lie in [0, 1]")
    costs = [float(c) for c in a.costs.split(",")] if a.costs else None
    words = None
    if a.words:
        from .datasets import load_words

        words = load_words(a.words)
    results = sweep_tradeoff(a_values, a.size, a.heldout, a.seed, costs, words)
    reports = [r for r, _ in results]
    out = Path(a.out)
    atomic_write_text(out / "distribution.csv", distribution_csv(reports))
    for r in reports:
        atomic_write_text(out / f"distribution_a{r.a:g}.svg", distribution_svg(r))
        print(f"a={r.a:g}: top D{r.top} share {r.fractions.max():.3f}, ratio {r.top_ratio:.2f}, {r.nonzero} dialects used")
    return 0


def cmd_bench(ctx: Context) -> int:
    from .bench import bench_ftp, bench_http, bench_mqtt

    a = ctx.args
    if a.protocol == "ftp":
        dialects = [int(d) for d in a.dialect.split(",")] if a.dialect else [8]
        table = bench_ftp(ctx.model("ftp"), ctx.tree("ftp"), dialects, a.repetitions, float(ctx.get("d7_delay")))
    elif a.protocol == "http":
        table = bench_http(ctx.model("http"), repetitions=a.repetitions)
    else:
        table = bench_mqtt(ctx.model("mqtt"), ctx.tree("mqtt"), a.repetitions)
    print(table.to_table())
    if a.json:
        atomic_write_text(a.json, table.to_json() + "\n")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dialect-auth", description="Protocol-dialect authentication toolkit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def endpoint(sp, model=True, tree=False):
        sp.add_argument("--host")
        sp.add_argument("--port", type=int)
        if model:
            sp.add_argument("--model")
        if tree:
            sp.add_argument("--tree")

    s = sub.add_parser("gen-datasets", help="write request corpus and reply-structure dataset")
    s.add_argument("--protocol", choices=PROTOCOLS, default="ftp")
    s.add_argument("--size", type=int, default=150_000)
    s.add_argument("--srv-size", type=int, default=30_000)
    s.add_argument("--words")
    s.add_argument("--out", default="data")
    s.set_defaults(func=cmd_gen_datasets)

    s = sub.add_parser("train-ddm", help="train a dialect decision model")
    s.add_argument("--protocol", choices=PROTOCOLS, default="ftp")
    s.add_argument("--requests", help="one request per line; generated when omitted")
    s.add_argument("--size", type=int, default=50_000)
    s.add_argument("--words")
    s.add_argument("-a", "--a", type=float, default=0.0, help="trade-off factor in [0, 1]")
    s.add_argument("--costs", help="comma-separated per-dialect costs")
    s.add_argument("--profile", choices=("desk", "reference"), default="desk")
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--confidence-weight", type=float)
    s.add_argument("--confidence-warmup", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_ddm)

    s = sub.add_parser("train-srv", help="train the reply-structure decision tree")
    s.add_argument("--protocol", choices=("ftp", "mqtt"), default="ftp")
    s.add_argument("--dataset")
    s.add_argument("--size", type=int, default=30_000)
    s.add_argument("--max-depth", type=int, default=16)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_srv)

    s = sub.add_parser("serve-ftp")
    endpoint(s)
    s.add_argument("--root")
    s.add_argument("--user")
    s.add_argument("--password")
    s.set_defaults(func=cmd_serve_ftp)

    s = sub.add_parser("ftp-get")
    endpoint(s, tree=True)
    s.add_argument("--user")
    s.add_argument("--password")
    s.add_argument("--out")
    s.add_argument("--transcript", help="append JSON-lines wire events here")
    s.add_argument("--plain", action="store_true", help="dialect-8 wire format, no model and no verification")
    s.add_argument("--pin-dialect", type=int, help="run the model but use this dialect (benchmarks)")
    s.add_argument("request", nargs="+", help='e.g. "get hello.txt"')
    s.set_defaults(func=cmd_ftp_get)

    s = sub.add_parser("serve-http")
    endpoint(s)
    s.add_argument("--root")
    s.set_defaults(func=cmd_serve_http)

    s = sub.add_parser("http-get")
    endpoint(s)
    s.add_argument("--out")
    s.add_argument("path")
    s.set_defaults(func=cmd_http_get)

    s = sub.add_parser("mqtt-broker")
    endpoint(s, tree=True)
    s.set_defaults(func=cmd_mqtt_broker)

    s = sub.add_parser("mqtt-pub")
    endpoint(s)
    s.add_argument("topic")
    s.add_argument("message")
    s.set_defaults(func=cmd_mqtt_pub)

    s = sub.add_parser("attack")
    s.add_argument("--kind", choices=("reroute", "replay", "flood"), required=True)
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--target", choices=("mallory", "bob"), default="mallory")
    s.add_argument("--strategy", choices=("plain", "fixed", "random_schema", "random_dialect"), default="plain")
    s.add_argument("--response-timeout", type=float, default=0.5)
    s.add_argument("--exact-replay-trials", type=int, default=0)
    s.add_argument("--genuine-trials", type=int, default=0)
    s.add_argument("--model")
    s.add_argument("--tree")
    s.add_argument("--json")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("sweep-tradeoff")
    s.add_argument("--a-values", default="0,0.4,0.8,1")
    s.add_argument("--size", type=int, default=50_000)
    s.add_argument("--heldout", type=int, default=10_000)
    s.add_argument("--costs")
    s.add_argument("--words")
    s.add_argument("--out", default="sweep")
    s.set_defaults(func=cmd_sweep_tradeoff)

    s = sub.add_parser("bench")
    s.add_argument("--protocol", choices=PROTOCOLS, default="ftp")
    s.add_argument("--dialect", help="comma-separated dialect ids (ftp)")
    s.add_argument("--repetitions", type=int, default=20)
    s.add_argument("--model")
    s.add_argument("--tree")
    s.add_argument("--json")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    ctx = Context(args)
    try:
        return args.func(ctx)
    except (DialectAuthError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
