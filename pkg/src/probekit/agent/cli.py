"""probekit-agent command line."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from probekit.agent.core import Agent, AgentError
from probekit.agent.daemon import Daemon, send_command
from probekit.scheduler import SchedulerError
from probekit.storage import StorageError


def default_home() -> Path:
    return Path(os.environ.get("PROBEKIT_HOME") or Path.home() / ".probekit")


def _print_info(info: dict) -> None:
    print(f"{info['name']} {info['version']}  ({info['experiment_id']})")
    print(f"  author:       {info['author']}  key {info['key_fingerprint'][:16]}")
    print(f"  origin:       {info['origin']}  verified={str(info['verified']).lower()}")
    print(f"  running:      {str(info['running']).lower()}")
    print(f"  capabilities: {', '.join(info['capabilities']) or '-'}")
    wp = info["wake_policy"]
    print(f"  wake policy:  allow_wakelocks={str(wp['allow_wakelocks']).lower()} active_only={str(wp['active_only']).lower()}")
    up = info["upload_policy"]
    if up["enabled"]:
        print(f"  upload:       every {up['period_minutes']} min to {up['server_url']}"
              f"{' (unmetered only)' if up['unmetered_only'] else ''}")
    else:
        print("  upload:       disabled")
    if info["description"]:
        print(f"  description:  {info['description']}")
    print("  plugins:")
    for p in info["plugins"]:
        sched = f"every {p['interval_ms']} ms" if p["interval_ms"] else "on event"
        opts = json.dumps(p["options"], sort_keys=True) if p["options"] else ""
        print(f"    {p['plugin_id']:<16} {sched:<16} {opts}")


def _via_daemon(home: Path, request: dict):
    """Return the daemon's reply, or None if no daemon is running."""
    try:
        status, body = send_command(home, request)
    except ConnectionError:
        return None
    if status != 200:
        raise AgentError(body.get("error", f"daemon answered {status}"))
    return body


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="probekit-agent", description="Run and manage experiments on this device.")
    p.add_argument("--home", type=Path, default=None, help="agent state directory (default $PROBEKIT_HOME or ~/.probekit)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)
    d = sub.add_parser("daemon", help="run the agent in the foreground")
    d.add_argument("--port", type=int, default=0)
    t = sub.add_parser("trust", help="trust an author's public key")
    t.add_argument("pubkey")
    i = sub.add_parser("import", help="install a package file")
    i.add_argument("pkg")
    i.add_argument("--trust", action="append", default=[], metavar="PUBKEY", help="also accept this key")
    f = sub.add_parser("fetch", help="install a package from a collection server")
    f.add_argument("--server", required=True)
    f.add_argument("--id", required=True, dest="experiment_id")
    f.add_argument("--version")
    f.add_argument("--trust", action="append", default=[], metavar="PUBKEY")
    sub.add_parser("list", help="list installed experiments")
    for name in ("info", "start", "stop", "status", "upload"):
        sp = sub.add_parser(name)
        sp.add_argument("experiment_id")
    dp = sub.add_parser("dump", help="copy sealed chunks to a directory")
    dp.add_argument("experiment_id")
    dp.add_argument("dest")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    home = args.home or default_home()

    try:
        if args.cmd == "daemon":
            Daemon(Agent(home), port=args.port).start().run_forever()
            return 0
        if args.cmd in ("start", "stop", "status", "upload", "dump"):
            req = {"command": args.cmd, "experiment_id": args.experiment_id}
            if args.cmd == "dump":
                req["dest"] = str(Path(args.dest).resolve())
            reply = _via_daemon(home, req)
            if reply is None:
                if args.cmd == "start":
                    raise AgentError("agent daemon is not running; start it with 'probekit-agent daemon'")
                agent = Agent(home)
                if args.cmd == "dump":
                    reply = {"files": [str(x) for x in agent.dump(args.experiment_id, args.dest)]}
                elif args.cmd == "upload":
                    reply = agent.upload_now(args.experiment_id).to_json()
                else:
                    reply = getattr(agent, args.cmd)(args.experiment_id).to_json()
            if args.cmd == "dump":
                print("\n".join(reply["files"]))
            else:
                print(json.dumps(reply, indent=2, sort_keys=True))
            return 0
        agent = Agent(home)
        if args.cmd == "trust":
            print(agent.trust_key(args.pubkey))
        elif args.cmd == "import":
            rec = agent.import_package(args.pkg, trusted_keys=args.trust)
            print(f"installed {rec.manifest.name} {rec.version} ({rec.experiment_id})")
        elif args.cmd == "fetch":
            rec = agent.fetch(args.server, args.experiment_id, args.version, trusted_keys=args.trust)
            print(f"installed {rec.manifest.name} {rec.version} ({rec.experiment_id})")
        elif args.cmd == "list":
            for rec in agent.list():
                state = "running" if rec.running or _is_running(home, rec.experiment_id) else "stopped"
                print(f"{rec.experiment_id}  {rec.version:<10} {state:<8} {rec.manifest.name}")
        elif args.cmd == "info":
            # the daemon knows the live run state; fall back to the state directory
            info = _via_daemon(home, {"command": "info", "experiment_id": args.experiment_id})
            _print_info(info or agent.info(args.experiment_id))
    except (AgentError, SchedulerError, StorageError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _is_running(home: Path, experiment_id: str) -> bool:
    try:
        reply = _via_daemon(home, {"command": "status", "experiment_id": experiment_id})
    except AgentError:
        return False
    return bool(reply and reply.get("running"))


if __name__ == "__main__":
    sys.exit(main())
