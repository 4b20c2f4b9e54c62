import io
import json
import subprocess
import tarfile
import threading
import time
from hashlib import sha256
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import pytest

from helpers import OS_RELEASE, TOOLBOX_APPLETS, layer_tar_bytes

from hpcrun.siteconfig import parse_config

TOOLBOX_SOURCE = r"""
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <unistd.h>

extern char **environ;

static int run_cat(int argc, char **argv) {
    char buf[65536];
    ssize_t n;
    if (argc < 2) {
        while ((n = read(0, buf, sizeof buf)) > 0)
            if (write(1, buf, (size_t)n) < 0) return 1;
        return 0;
    }
    for (int i = 1; i < argc; i++) {
        FILE *f = fopen(argv[i], "rb");
        if (!f) { fprintf(stderr, "cat: %s: cannot open\n", argv[i]); return 1; }
        size_t m;
        while ((m = fread(buf, 1, sizeof buf, f)) > 0) fwrite(buf, 1, m, stdout);
        fclose(f);
    }
    fflush(stdout);
    return 0;
}

int main(int argc, char **argv) {
    const char *base = strrchr(argv[0], '/');
    base = base ? base + 1 : argv[0];
    if (!strcmp(base, "cat")) return run_cat(argc, argv);
    if (!strcmp(base, "exitwith")) return argc > 1 ? atoi(argv[1]) : 0;
    if (!strcmp(base, "pwd")) {
        char buf[4096];
        if (getcwd(buf, sizeof buf)) puts(buf);
        return 0;
    }
    if (!strcmp(base, "ids")) {
        printf("uid=%d euid=%d gid=%d egid=%d\n",
               (int)getuid(), (int)geteuid(), (int)getgid(), (int)getegid());
        return 0;
    }
    if (!strcmp(base, "printenv")) {
        if (argc > 1) {
            const char *v = getenv(argv[1]);
            if (!v) return 1;
            puts(v);
        } else {
            for (char **e = environ; *e; e++) puts(*e);
        }
        return 0;
    }
    if (!strcmp(base, "sleepy")) {
        sleep(argc > 1 ? (unsigned)atoi(argv[1]) : 1);
        return 0;
    }
    if (!strcmp(base, "echo")) {
        for (int i = 1; i < argc; i++) {
            fputs(argv[i], stdout);
            if (i + 1 < argc) fputc(' ', stdout);
        }
        fputc('\n', stdout);
        return 0;
    }
    fprintf(stderr, "toolbox: unknown applet %s\n", base);
    return 64;
}
"""

STUB_LIB_SOURCE = "int stub_symbol(void) { return %d; }\n"


@pytest.fixture(scope="session")
def toolbox(tmp_path_factory) -> Path:
    """Statically linked multi-call binary installed into fixture images."""
    workdir = tmp_path_factory.mktemp("toolbox")
    src = workdir / "toolbox.c"
    src.write_text(TOOLBOX_SOURCE)
    binary = workdir / "toolbox"
    subprocess.run(["gcc", "-static", "-O2", "-o", str(binary), str(src)],
                   check=True, capture_output=True)
    return binary


@pytest.fixture(scope="session")
def stub_lib(tmp_path_factory):
    """Factory for tiny shared objects carrying a chosen soname."""
    workdir = tmp_path_factory.mktemp("stublibs")
    cache: dict[tuple, Path] = {}
    counter = [0]

    def build(filename: str, soname: str | None = None, directory: Path | None = None) -> Path:
        key = (filename, soname, str(directory))
        if key in cache:
            return cache[key]
        counter[0] += 1
        src = workdir / ("stub%d.c" % counter[0])
        src.write_text(STUB_LIB_SOURCE % counter[0])
        out_dir = directory or workdir
        out_dir.mkdir(parents=True, exist_ok=True)
        out = out_dir / filename
        cmd = ["gcc", "-shared", "-fPIC", "-o", str(out), str(src)]
        if soname:
            cmd.insert(2, "-Wl,-soname,%s" % soname)
        subprocess.run(cmd, check=True, capture_output=True)
        cache[key] = out
        return out

    return build


def base_image_layers(toolbox: Path, os_release: str = OS_RELEASE,
                      extra_entries=()) -> list[list]:
    """Entry specs for a minimal bootable fixture image (one layer)."""
    entries = [
        ("dir", "bin", 0o755),
        ("dir", "etc", 0o755),
        ("copy", "bin/toolbox", str(toolbox), 0o755),
        ("file", "etc/os-release", os_release, 0o644),
    ]
    for applet in TOOLBOX_APPLETS:
        entries.append(("symlink", "bin/%s" % applet, "toolbox"))
    entries.extend(extra_entries)
    return [entries]


def image_tarball_bytes(layers: list[list], env=None, entrypoint=None, cmd=None,
                        workdir=None, repo_tag="fixture:latest",
                        compress_layers: bool = False) -> bytes:
    """Standard multi-layer save-format archive for import tests."""
    layer_blobs = [layer_tar_bytes(entries, compress=compress_layers)
                   for entries in layers]
    config_doc = {"config": {
        "Env": env or ["PATH=/usr/local/bin:/usr/bin:/bin"],
        "Entrypoint": entrypoint,
        "Cmd": cmd,
        "WorkingDir": workdir or "",
    }}
    config_bytes = json.dumps(config_doc).encode()
    config_name = sha256(config_bytes).hexdigest() + ".json"
    layer_names = ["%s/layer.tar" % sha256(blob).hexdigest() for blob in layer_blobs]
    manifest = [{"Config": config_name, "RepoTags": [repo_tag], "Layers": layer_names}]

    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w") as tf:
        def add(name, data):
            info = tarfile.TarInfo(name)
            info.size = len(data)
            tf.addfile(info, io.BytesIO(data))
        add("manifest.json", json.dumps(manifest).encode())
        add(config_name, config_bytes)
        for name, blob in zip(layer_names, layer_blobs):
            add(name, blob)
    return buf.getvalue()


class FixtureRegistry:
    """In-memory registry v2 server with request counting and fault knobs."""

    def __init__(self):
        self.manifests: dict[tuple, bytes] = {}    # (repo, tag) -> manifest doc
        self.blobs: dict[tuple, bytes] = {}        # (repo, digest) -> content
        self.blob_requests: list[str] = []
        self.manifest_requests: list[str] = []
        self.delay = 0.0
        self.corrupt_digests: set[str] = set()
        self._lock = threading.Lock()
        registry = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_GET(self):
                registry.handle(self)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def base_url(self) -> str:
        return "http://127.0.0.1:%d" % self.server.server_address[1]

    def close(self):
        self.server.shutdown()
        self.server.server_close()

    def add_image(self, repo: str, tag: str, layer_blobs: list[bytes],
                  env=None, entrypoint=None, cmd=None, workdir=None) -> None:
        config_doc = {"config": {
            "Env": env or ["PATH=/usr/local/bin:/usr/bin:/bin"],
            "Entrypoint": entrypoint,
            "Cmd": cmd,
            "WorkingDir": workdir or "",
        }}
        config_bytes = json.dumps(config_doc).encode()
        config_digest = "sha256:" + sha256(config_bytes).hexdigest()
        self.blobs[(repo, config_digest)] = config_bytes
        layers = []
        for blob in layer_blobs:
            digest = "sha256:" + sha256(blob).hexdigest()
            self.blobs[(repo, digest)] = blob
            layers.append({"digest": digest, "size": len(blob),
                           "mediaType": "application/vnd.docker.image.rootfs.diff.tar"})
        manifest = {
            "schemaVersion": 2,
            "mediaType": "application/vnd.docker.distribution.manifest.v2+json",
            "config": {"digest": config_digest, "size": len(config_bytes)},
            "layers": layers,
        }
        self.manifests[(repo, tag)] = json.dumps(manifest).encode()

    def handle(self, request: BaseHTTPRequestHandler):
        if self.delay:
            time.sleep(self.delay)
        parts = request.path.split("/")
        # /v2/<repo...>/{manifests,blobs}/<item>
        if len(parts) < 5 or parts[1] != "v2":
            request.send_error(404)
            return
        item = parts[-1]
        kind = parts[-2]
        repo = "/".join(parts[2:-2])
        if kind == "manifests":
            with self._lock:
                self.manifest_requests.append("%s/%s" % (repo, item))
            body = self.manifests.get((repo, item))
            ctype = "application/vnd.docker.distribution.manifest.v2+json"
        elif kind == "blobs":
            with self._lock:
                self.blob_requests.append("%s/%s" % (repo, item))
            body = self.blobs.get((repo, item))
            if body is not None and item in self.corrupt_digests:
                body = bytes([body[0] ^ 0xFF]) + body[1:]
            ctype = "application/octet-stream"
        else:
            request.send_error(404)
            return
        if body is None:
            request.send_error(404)
            return
        request.send_response(200)
        request.send_header("Content-Type", ctype)
        request.send_header("Content-Length", str(len(body)))
        request.end_headers()
        request.wfile.write(body)


@pytest.fixture
def registry():
    reg = FixtureRegistry()
    yield reg
    reg.close()


@pytest.fixture
def make_site(tmp_path):
    """Factory: write a site config document and parse it into a SiteConfig."""

    def build(text_extra: str = "", registry_url: str | None = None,
              store: Path | None = None) -> tuple:
        store = store or tmp_path / "store"
        lines = ["[gateway]", "image_store = %s" % store]
        if registry_url:
            lines.append("registry_base_url = %s" % registry_url)
        text = "\n".join(lines) + "\n" + text_extra
        path = tmp_path / "site.config"
        path.write_text(text)
        return parse_config(text), path

    return build
