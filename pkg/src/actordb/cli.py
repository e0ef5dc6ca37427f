"""``actordb`` command line.

Exit codes: 0 ok, 1 runtime error, 2 validation error. Errors go to stderr
as one JSON line ``{"code", "message"}``.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
from pathlib import Path
from typing import Optional

from actordb import bench, dag
from actordb.canonical import b64url
from actordb.config import EngineConfig
from actordb.engine import Engine, load_security, save_security
from actordb.errors import ActorDBError, InvalidArgument, ValidationError
from actordb.security import AuditLog, Principal, raw_private


def _emit(doc) -> None:
    print(json.dumps(doc, sort_keys=True, default=str))


def _security(config: EngineConfig):
    audit = AuditLog(config.audit_path)
    return load_security(config, audit), audit


def _read_token(path: str) -> str:
    text = Path(path).read_text().strip()
    if text.startswith("{"):
        return json.loads(text)["token"]
    return text


def _attrs(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise InvalidArgument(f"attribute must be key=value, got {pair!r}")
        try:
            out[key] = json.loads(value)
        except ValueError:
            out[key] = value
    return out


# -- commands ---------------------------------------------------------------------


def cmd_serve(args, config: EngineConfig) -> int:
    from actordb.server import ActorDBServer

    engine = Engine(config)
    engine.start()
    server = ActorDBServer(engine)
    host, port = server.server_address[:2]
    print(json.dumps({"listening": f"{host}:{port}", "order": engine.order}), file=sys.stderr, flush=True)

    def stop(signum, frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, stop)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stopping.set()
        server.server_close()
        engine.close()
    return 0


def cmd_bench(args, config: EngineConfig) -> int:
    cfg = bench.BenchConfig(polling_interval_ms=config.polling_interval_ms, gc_during_timing=args.gc_during_timing)
    report = bench.run(args.which, args.n, cfg)
    if args.json:
        print(bench.report_json(report))
    else:
        print(report.table())
    return 0


def cmd_query(args, config: EngineConfig) -> int:
    engine = Engine(config)
    try:
        rows = engine.query(_read_token(args.token), args.sql)
    finally:
        engine.close()
    _emit({"rows": rows})
    return 0


def cmd_policy_apply(args, config: EngineConfig) -> int:
    sec, audit = _security(config)
    policies = sec.load_policies(json.loads(Path(args.path).read_text()), principal_id=args.actor)
    save_security(config, sec)
    audit.close()
    _emit({"applied": [p.policy_id for p in policies]})
    return 0


def cmd_principal_add(args, config: EngineConfig) -> int:
    sec, audit = _security(config)
    p = sec.register_principal(Principal(args.principal_id, frozenset(args.role or ()), _attrs(args.attr)))
    save_security(config, sec)
    audit.close()
    _emit(p.to_json())
    return 0


def cmd_keys_issue(args, config: EngineConfig) -> int:
    sec, audit = _security(config)
    private, rec = sec.new_key(args.principal)
    token = sec.issue_token(args.principal, rec.key_id, args.ttl)
    save_security(config, sec)
    audit.close()
    doc = {
        "principal_id": args.principal,
        "key_id": rec.key_id,
        "token": token.encode(),
        "expires_at": token.expires_at,
        "private_key": b64url(raw_private(private)),
    }
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True))
        doc = {k: v for k, v in doc.items() if k != "private_key"}
        doc["written"] = args.out
    _emit(doc)
    return 0


def cmd_keys_revoke(args, config: EngineConfig) -> int:
    sec, audit = _security(config)
    sec.revoke_key(args.key_id, principal_id=args.actor)
    save_security(config, sec)
    audit.close()
    _emit({"revoked": args.key_id})
    return 0


def cmd_dag(args, config: EngineConfig) -> int:
    manifest = dag.load(args.path)
    if args.action == "validate":
        _emit({"ok": True, "nodes": len(manifest.nodes), "root_hash": manifest.root_hash.hex()})
    elif args.action == "order":
        _emit({"order": dag.topo_order(manifest)})
    else:
        if not args.node:
            raise InvalidArgument("diagnose needs --node")
        _emit({"diagnose": dag.diagnose(manifest, args.node)})
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="engine config JSON")
    parser = argparse.ArgumentParser(prog="actordb", description="Event-sourced actor database", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", parents=[common], help="run the line-protocol server")
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("bench", parents=[common], help="run a benchmark")
    p.add_argument("which", choices=sorted(bench.BENCHES))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--json", action="store_true")
    p.add_argument("--gc-during-timing", action="store_true", help="keep the cyclic GC on in timed sections")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("query", parents=[common], help="run one statement")
    p.add_argument("--token", required=True, help="token file written by 'keys issue'")
    p.add_argument("sql")
    p.set_defaults(fn=cmd_query)

    p = sub.add_parser("policy", parents=[common], help="manage policies")
    psub = p.add_subparsers(dest="action", required=True)
    pa = psub.add_parser("apply", parents=[common])
    pa.add_argument("path")
    pa.add_argument("--actor", default="admin")
    pa.set_defaults(fn=cmd_policy_apply)

    p = sub.add_parser("principal", parents=[common], help="manage principals")
    psub = p.add_subparsers(dest="action", required=True)
    pa = psub.add_parser("add", parents=[common])
    pa.add_argument("principal_id")
    pa.add_argument("--role", action="append")
    pa.add_argument("--attr", action="append", help="key=value (value parsed as JSON when possible)")
    pa.set_defaults(fn=cmd_principal_add)

    p = sub.add_parser("keys", parents=[common], help="issue or revoke keys")
    ksub = p.add_subparsers(dest="action", required=True)
    ki = ksub.add_parser("issue", parents=[common])
    ki.add_argument("--principal", required=True)
    ki.add_argument("--ttl", type=float, default=300)
    ki.add_argument("--out")
    ki.set_defaults(fn=cmd_keys_issue)
    kr = ksub.add_parser("revoke", parents=[common])
    kr.add_argument("key_id")
    kr.add_argument("--actor", default="admin")
    kr.set_defaults(fn=cmd_keys_revoke)

    p = sub.add_parser("dag", parents=[common], help="inspect a process manifest")
    p.add_argument("action", choices=["validate", "order", "diagnose"])
    p.add_argument("path")
    p.add_argument("--node")
    p.set_defaults(fn=cmd_dag)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = EngineConfig.load(getattr(args, "config", None))
        return args.fn(args, config)
    except ValidationError as exc:
        print(json.dumps(exc.to_json()), file=sys.stderr)
        return 2
    except ActorDBError as exc:
        print(json.dumps(exc.to_json()), file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(json.dumps({"code": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
