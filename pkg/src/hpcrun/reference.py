"""Image reference parsing and normalization.

Accepted syntax::

    [docker:][registry/]repository[:tag][@algo:digest]

The ``docker:`` scheme prefix used by the gateway client is stripped.  A
first path component containing a dot or a colon (or equal to
``localhost``) is treated as the registry host, the usual ecosystem
heuristic.  A missing registry falls back to the configured default; a
missing tag becomes ``latest`` unless a digest pins the image.
"""

import re
from dataclasses import dataclass, replace

from .errors import MalformedReferenceError

DEFAULT_REGISTRY = "registry-1.docker.io"

_SCHEME_PREFIX = "docker:"

_REPO_COMPONENT = r"[a-z0-9]+(?:(?:[._]|__|-+)[a-z0-9]+)*"
_REPO_RE = re.compile(r"^%s(?:/%s)*$" % (_REPO_COMPONENT, _REPO_COMPONENT))
_TAG_RE = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9._-]{0,127}$")
_DIGEST_RE = re.compile(r"^[a-z0-9]+:[a-f0-9]{32,}$")
_REGISTRY_RE = re.compile(r"^[A-Za-z0-9.-]+(?::[0-9]+)?$")


@dataclass(frozen=True)
class ImageReference:
    """A normalized name for a remote or locally imported image."""

    registry: str
    repository: str
    tag: str = "latest"
    digest: str | None = None

    def render(self) -> str:
        """Canonical string form; parsing it again yields an equal reference."""
        out = "%s/%s" % (self.registry, self.repository)
        if self.tag:
            out += ":" + self.tag
        if self.digest:
            out += "@" + self.digest
        return out

    @property
    def key(self) -> str:
        """Catalog key; one non-FAILED entry may exist per key."""
        return self.render()

    def short(self) -> str:
        if self.registry == DEFAULT_REGISTRY:
            return self.render().split("/", 1)[1]
        return self.render()

    def __str__(self) -> str:
        return self.render()


def parse_image_reference(raw: str, default_registry: str = DEFAULT_REGISTRY) -> ImageReference:
    """Parse and normalize ``raw`` into an ImageReference.

    Raises MalformedReferenceError for empty repositories, illegal
    characters, or conflicting tag/digest syntax.
    """
    if not raw or not raw.strip():
        raise MalformedReferenceError("empty reference")
    text = raw.strip()
    if text.startswith(_SCHEME_PREFIX):
        text = text[len(_SCHEME_PREFIX):]
    if not text:
        raise MalformedReferenceError("empty reference after scheme prefix")

    digest = None
    if "@" in text:
        text, _, digest = text.partition("@")
        if "@" in digest:
            raise MalformedReferenceError("multiple digest separators in %r" % raw)
        if not _DIGEST_RE.match(digest):
            raise MalformedReferenceError("bad digest syntax %r" % digest)

    registry = default_registry
    first, _, rest = text.partition("/")
    if rest and ("." in first or ":" in first or first == "localhost"):
        if not _REGISTRY_RE.match(first):
            raise MalformedReferenceError("bad registry host %r" % first)
        registry = first
        text = rest

    tag = ""
    if ":" in text:
        text, _, tag = text.rpartition(":")
        if not _TAG_RE.match(tag):
            raise MalformedReferenceError("bad tag %r" % tag)
    if not tag and not digest:
        tag = "latest"

    if not text:
        raise MalformedReferenceError("empty repository in %r" % raw)
    if not _REPO_RE.match(text):
        raise MalformedReferenceError("bad repository %r" % text)

    return ImageReference(registry=registry, repository=text, tag=tag, digest=digest)


def with_default_registry(ref: ImageReference, default_registry: str) -> ImageReference:
    """Re-home a reference parsed with the built-in default onto a site default."""
    if ref.registry == DEFAULT_REGISTRY and default_registry != DEFAULT_REGISTRY:
        return replace(ref, registry=default_registry)
    return ref
