"""Isolated, network-free workspaces for agent experiments.

A workspace is a clean working copy of a repository fixture plus auxiliary
files under ``aux/``. Commands run through bash inside the workspace root
with output caps and a timeout. The isolation mechanism is pluggable; the
built-in one is a restricted subprocess:

* scrubbed environment (minimal PATH, HOME/TMPDIR inside the workspace,
  HTTP proxies pointed at a dead local port so network probes fail fast);
* when the calling process is root, each workspace gets its own uid and the
  command is demoted to it, with parent directories mode 0711 — commands can
  then write only inside their own workspace.

Required toolset inside workspaces (documented, and the only one tested):
bash, git, grep, find, head, cat, ls, wc.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import os
import shutil
import signal
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

logger = logging.getLogger(__name__)

TRUNCATION_MARK = "\n[output truncated]"

#: Fixed probe used by the network-isolation tests; must fail in every workspace.
NETWORK_PROBE = "curl -sS --max-time 5 http://example.com/"

_uid_counter = itertools.count()
_uid_lock = threading.Lock()
_UID_BASE = 61000
_UID_SPAN = 2000


def _next_uid() -> int:
    with _uid_lock:
        return _UID_BASE + next(_uid_counter) % _UID_SPAN


class ProvisioningError(Exception):
    pass


class LifecycleError(Exception):
    """Raised when a workspace is used after teardown."""


@dataclass(frozen=True)
class RepoSpec:
    """Locator for a local repository fixture.

    ``path`` points at either a plain directory template (copied as-is) or a
    git repository (cloned; ``revision`` checked out when given).
    """

    name: str
    path: str
    revision: str | None = None


@dataclass(frozen=True)
class ExecutionLimits:
    timeout_s: float = 30.0
    output_cap: int = 8192  # characters per stream, truncation mark included


@dataclass(frozen=True)
class ToolResult:
    command: str
    exit_code: int
    stdout: str
    stderr: str
    truncated: bool
    wall_time_s: float
    timed_out: bool = False


def _cap(text: str, cap: int) -> tuple[str, bool]:
    if len(text) <= cap:
        return text, False
    return text[: cap - len(TRUNCATION_MARK)] + TRUNCATION_MARK, True


@dataclass
class Workspace:
    id: str
    root: Path  # the working copy; repository at root, aux files under aux/
    repo_spec: RepoSpec
    aux_index: tuple[str, ...]
    provisioned_at: str
    _outer: Path = field(repr=False, default=None)  # type: ignore[assignment]
    _uid: int | None = field(repr=False, default=None)
    _live: bool = field(repr=False, default=True)
    _lock: threading.Lock = field(repr=False, default_factory=threading.Lock)

    @property
    def live(self) -> bool:
        return self._live

    def _env(self) -> dict[str, str]:
        dead_proxy = "http://127.0.0.1:9"
        return {
            "PATH": "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin",
            "HOME": str(self.root),
            "TMPDIR": str(self.root / ".tmp"),
            "LANG": "C.UTF-8",
            "LC_ALL": "C.UTF-8",
            "GIT_TERMINAL_PROMPT": "0",
            "http_proxy": dead_proxy,
            "https_proxy": dead_proxy,
            "HTTP_PROXY": dead_proxy,
            "HTTPS_PROXY": dead_proxy,
            "no_proxy": "",
        }

    def execute(self, command: str, limits: ExecutionLimits | None = None) -> ToolResult:
        """Run ``command`` through bash inside the workspace root.

        Never raises for command failures: nonzero exits, timeouts, and kills
        are all encoded in the ToolResult so agents can recover.
        """
        if not self._live:
            raise LifecycleError(f"workspace {self.id} is torn down")
        limits = limits or ExecutionLimits()

        preexec = None
        if self._uid is not None:
            uid = self._uid

            def preexec() -> None:
                os.setgid(uid)
                os.setuid(uid)

        # One command at a time per workspace.
        with self._lock:
            start = time.perf_counter()
            timed_out = False
            proc = subprocess.Popen(
                ["bash", "-c", command],
                cwd=str(self.root),
                env=self._env(),
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                errors="replace",
                start_new_session=True,
                preexec_fn=preexec,
            )
            try:
                out, err = proc.communicate(timeout=limits.timeout_s)
            except subprocess.TimeoutExpired:
                timed_out = True
                try:
                    os.killpg(proc.pid, signal.SIGKILL)
                except ProcessLookupError:
                    pass
                out, err = proc.communicate()
            wall = time.perf_counter() - start

        out, out_trunc = _cap(out or "", limits.output_cap)
        err, err_trunc = _cap(err or "", limits.output_cap)
        if timed_out:
            err = (err + f"\n[killed after {limits.timeout_s:g}s timeout]").lstrip("\n")
        return ToolResult(
            command=command,
            exit_code=proc.returncode if proc.returncode is not None else -1,
            stdout=out,
            stderr=err,
            truncated=out_trunc or err_trunc,
            wall_time_s=wall,
            timed_out=timed_out,
        )


def _copy_template(spec: RepoSpec, dest: Path) -> None:
    src = Path(spec.path)
    if not src.exists():
        raise ProvisioningError(f"repository fixture not found: {spec.path}")
    if (src / ".git").exists():
        run = subprocess.run(
            ["git", "clone", "--quiet", str(src), str(dest)],
            capture_output=True, text=True,
        )
        if run.returncode != 0:
            raise ProvisioningError(f"git clone failed: {run.stderr.strip()}")
        if spec.revision:
            run = subprocess.run(
                ["git", "-C", str(dest), "checkout", "--quiet", spec.revision],
                capture_output=True, text=True,
            )
            if run.returncode != 0:
                raise ProvisioningError(
                    f"checkout of {spec.revision!r} failed: {run.stderr.strip()}")
    else:
        if spec.revision:
            raise ProvisioningError(
                f"revision {spec.revision!r} requested but {spec.path} is not a git repository")
        shutil.copytree(src, dest)


def provision(repo_spec: RepoSpec, aux_files: dict[str, str] | None = None,
              base_dir: str | os.PathLike[str] | None = None,
              isolation: str = "auto") -> Workspace:
    """Create a fresh workspace: clean working copy plus aux files.

    ``isolation`` is "auto" (demote commands to a per-workspace uid when
    running as root), "uid" (require it), or "none".
    """
    aux_files = aux_files or {}
    if base_dir is None:
        base = Path(tempfile.mkdtemp(prefix="agentmine-ws-"))
    else:
        base = Path(base_dir)
        base.mkdir(parents=True, exist_ok=True)

    ws_id = f"ws-{next(_ws_counter):06d}"
    outer = Path(tempfile.mkdtemp(prefix=ws_id + "-", dir=base))
    work = outer / "work"

    try:
        _copy_template(repo_spec, work)
        (work / ".tmp").mkdir(exist_ok=True)
        aux = work / "aux"
        for name, blob in sorted(aux_files.items()):
            target = aux / name
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(blob, encoding="utf-8")
    except ProvisioningError:
        shutil.rmtree(outer, ignore_errors=True)
        raise

    uid: int | None = None
    want_uid = isolation == "uid" or (isolation == "auto" and os.geteuid() == 0)
    if want_uid:
        if os.geteuid() != 0:
            raise ProvisioningError("uid isolation requires root")
        uid = _next_uid()
        for p in itertools.chain([work], work.rglob("*")):
            os.chown(p, uid, uid)
        # Traversal without listing/writing for the demoted command.
        os.chmod(base, 0o711)
        os.chmod(outer, 0o711)
        os.chmod(work, 0o700)

    return Workspace(
        id=ws_id,
        root=work,
        repo_spec=repo_spec,
        aux_index=tuple(sorted(aux_files)),
        provisioned_at=datetime.now(timezone.utc).isoformat(),
        _outer=outer,
        _uid=uid,
    )


_ws_counter = itertools.count(1)


def fingerprint(workspace: Workspace) -> str:
    """Content fingerprint of the working copy: a pure function of
    repo_spec + aux_files (git internals and scratch space excluded)."""
    if not workspace.live:
        raise LifecycleError(f"workspace {workspace.id} is torn down")
    digest = hashlib.sha256()
    root = workspace.root
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if rel.startswith(".git/") or rel.startswith(".tmp/"):
            continue
        digest.update(rel.encode())
        digest.update(b"\0")
        digest.update(path.read_bytes())
        digest.update(b"\0")
    return digest.hexdigest()


def teardown(workspace: Workspace) -> bool:
    """Remove all workspace state. Idempotent: double teardown is a no-op."""
    if not workspace._live:
        return True
    workspace._live = False
    shutil.rmtree(workspace._outer, ignore_errors=True)
    return True
