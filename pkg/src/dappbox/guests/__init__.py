"""Guest sources and their build products.

``dapp.c`` is compiled twice: to a wasm32 module with clang's WebAssembly
backend, and to a native shared library together with ``native_shim.c``.
The ``*.wat`` guests are assembled with wasmtime's text parser. Outputs are
cached under ``$DAPPBOX_CACHE`` (default ``~/.cache/dappbox``), keyed by a
hash of the sources and flags, so edits trigger a rebuild.
"""

from __future__ import annotations

import hashlib
import os
import shutil
import subprocess
from pathlib import Path

SOURCE_DIR = Path(__file__).resolve().parent

WAT_GUESTS = ("load", "trap", "forbidden", "checksum", "echo")

COMMON_CFLAGS = ["-O2", "-ffp-contract=off", "-fno-fast-math", "-Wall"]
WASM_FLAGS = [
    "--target=wasm32",
    "-nostdlib",
    "-ffreestanding",
    "-Wl,--no-entry",
    "-Wl,-z,stack-size=65536",
]
NATIVE_FLAGS = ["-shared", "-fPIC", "-fvisibility=hidden", "-DNATIVE_BUILD"]


class BuildError(RuntimeError):
    pass


def cache_dir() -> Path:
    root = Path(os.environ.get("DAPPBOX_CACHE", Path.home() / ".cache" / "dappbox"))
    root.mkdir(parents=True, exist_ok=True)
    return root


def _digest(*parts: bytes) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
        h.update(b"\0")
    return h.hexdigest()[:16]


def _compiler(env_var: str, *candidates: str) -> str:
    if os.environ.get(env_var):
        return os.environ[env_var]
    for c in candidates:
        found = shutil.which(c)
        if found:
            return found
    raise BuildError(f"no compiler found (tried {', '.join(candidates)}; set ${env_var})")


def _run(cmd: list[str]) -> None:
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise BuildError(f"{' '.join(cmd)}\n{proc.stderr}")


def _atomic_build(target: Path, build) -> Path:
    if target.exists():
        return target
    tmp = target.with_suffix(target.suffix + f".{os.getpid()}.tmp")
    build(tmp)
    os.replace(tmp, target)
    return target


def dapp_wasm() -> Path:
    """Path to the wasm32 build of the sensing dApp."""
    src = SOURCE_DIR / "dapp.c"
    flags = COMMON_CFLAGS + WASM_FLAGS
    key = _digest(src.read_bytes(), " ".join(flags).encode())
    target = cache_dir() / f"dapp-{key}.wasm"

    def build(out: Path) -> None:
        cc = _compiler("DAPPBOX_WASM_CC", "clang")
        _run([cc, *flags, "-o", str(out), str(src)])

    return _atomic_build(target, build)


def dapp_native() -> Path:
    """Path to the native shared-library build of the sensing dApp."""
    srcs = [SOURCE_DIR / "dapp.c", SOURCE_DIR / "native_shim.c"]
    flags = COMMON_CFLAGS + NATIVE_FLAGS
    key = _digest(*(s.read_bytes() for s in srcs), " ".join(flags).encode())
    target = cache_dir() / f"libdapp-{key}.so"

    def build(out: Path) -> None:
        cc = _compiler("DAPPBOX_CC", "cc", "clang", "gcc")
        _run([cc, *flags, "-o", str(out), *map(str, srcs)])

    return _atomic_build(target, build)


def wat_guest(name: str) -> Path:
    """Assemble ``<name>.wat`` and return the path of the binary module."""
    import wasmtime

    src = SOURCE_DIR / f"{name}.wat"
    if not src.exists():
        raise FileNotFoundError(src)
    text = src.read_text()
    target = cache_dir() / f"{name}-{_digest(text.encode())}.wasm"
    return _atomic_build(target, lambda out: out.write_bytes(wasmtime.wat2wasm(text)))


def guest_path(name: str) -> Path:
    if name == "dapp":
        return dapp_wasm()
    return wat_guest(name)
