"""Registry v2 pull client.

Speaks the two endpoints the gateway needs:

    GET /v2/<repository>/manifests/<tag-or-digest>
    GET /v2/<repository>/blobs/<digest>

Anonymous pulls are the norm; a 401 carrying a Bearer challenge triggers
an anonymous token fetch and one retry.  Tests point ``base_url`` at a
local fixture server, so no network is required at desk scale.
"""

import hashlib
import json
import logging
import re
from dataclasses import dataclass

import requests

from .errors import (
    DigestMismatchError,
    ManifestNotFoundError,
    RegistryUnreachableError,
)
from .imagefs import ImageConfig
from .reference import DEFAULT_REGISTRY, ImageReference

logger = logging.getLogger(__name__)

MANIFEST_MEDIA_TYPES = (
    "application/vnd.docker.distribution.manifest.v2+json",
    "application/vnd.oci.image.manifest.v1+json",
)

_BEARER_RE = re.compile(r'Bearer realm="([^"]*)",service="([^"]*)"')


@dataclass(frozen=True)
class LayerDescriptor:
    digest: str
    size: int
    media_type: str


@dataclass
class ImageManifest:
    reference: ImageReference
    layers: list[LayerDescriptor]
    config_digest: str
    config: ImageConfig | None = None

    def __post_init__(self):
        if not self.layers:
            raise ManifestNotFoundError("manifest for %s lists no layers" % self.reference)
        digests = [l.digest for l in self.layers]
        if len(set(digests)) != len(digests):
            raise ManifestNotFoundError("duplicate layer digest in manifest for %s"
                                        % self.reference)


def parse_manifest_document(ref: ImageReference, doc: dict) -> ImageManifest:
    if doc.get("schemaVersion") != 2:
        raise ManifestNotFoundError("unsupported manifest schema for %s" % ref)
    layers = [LayerDescriptor(digest=l["digest"], size=int(l.get("size", 0)),
                              media_type=l.get("mediaType", ""))
              for l in doc.get("layers", [])]
    return ImageManifest(reference=ref, layers=layers,
                         config_digest=doc["config"]["digest"])


class RegistryClient:
    """HTTP client for one pull; holds the session and a cached token."""

    def __init__(self, base_url: str | None = None, timeout: float = 60.0,
                 session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/") if base_url else None
        self.timeout = timeout
        self.session = session or requests.Session()
        self._token = None

    def _repo_path(self, ref: ImageReference) -> str:
        # Single-component names on the default registry live under library/.
        if ref.registry == DEFAULT_REGISTRY and "/" not in ref.repository:
            return "library/" + ref.repository
        return ref.repository

    def _url(self, ref: ImageReference, kind: str, item: str) -> str:
        base = self.base_url or "https://%s" % ref.registry
        return "%s/v2/%s/%s/%s" % (base, self._repo_path(ref), kind, item)

    def _get(self, url: str, headers: dict | None = None, stream: bool = False):
        headers = dict(headers or {})
        if self._token:
            headers["Authorization"] = "Bearer %s" % self._token
        try:
            resp = self.session.get(url, headers=headers, stream=stream,
                                    timeout=self.timeout)
        except requests.RequestException as exc:
            raise RegistryUnreachableError(str(exc))
        if resp.status_code == 401 and not self._token:
            token = self._fetch_anonymous_token(resp.headers.get("Www-Authenticate", ""))
            if token:
                self._token = token
                return self._get(url, headers=headers, stream=stream)
        return resp

    def _fetch_anonymous_token(self, challenge: str) -> str | None:
        m = _BEARER_RE.match(challenge)
        if not m:
            return None
        try:
            resp = self.session.get("%s?service=%s" % (m.group(1), m.group(2)),
                                    timeout=self.timeout)
            return resp.json().get("token")
        except (requests.RequestException, ValueError):
            return None

    def fetch_manifest(self, ref: ImageReference) -> ImageManifest:
        item = ref.digest or ref.tag
        resp = self._get(self._url(ref, "manifests", item),
                         headers={"Accept": ", ".join(MANIFEST_MEDIA_TYPES)})
        if resp.status_code == 404:
            raise ManifestNotFoundError("no manifest for %s" % ref)
        if resp.status_code != 200:
            raise RegistryUnreachableError(
                "manifest fetch for %s returned %d" % (ref, resp.status_code))
        try:
            doc = resp.json()
        except ValueError as exc:
            raise ManifestNotFoundError("manifest for %s is not JSON: %s" % (ref, exc))
        return parse_manifest_document(ref, doc)

    def fetch_config(self, ref: ImageReference, digest: str) -> ImageConfig:
        data = self._blob_bytes(ref, digest)
        return ImageConfig.from_docker_config(json.loads(data))

    def _blob_bytes(self, ref: ImageReference, digest: str) -> bytes:
        resp = self._get(self._url(ref, "blobs", digest))
        if resp.status_code != 200:
            raise ManifestNotFoundError("blob %s for %s returned %d"
                                        % (digest, ref, resp.status_code))
        data = resp.content
        _verify_digest(digest, hashlib.sha256(data).hexdigest())
        return data

    def fetch_blob_to_file(self, ref: ImageReference, digest: str, dest) -> None:
        """Stream one blob to ``dest``, verifying its digest on the way."""
        resp = self._get(self._url(ref, "blobs", digest), stream=True)
        if resp.status_code != 200:
            raise ManifestNotFoundError("blob %s for %s returned %d"
                                        % (digest, ref, resp.status_code))
        h = hashlib.sha256()
        with open(dest, "wb") as out:
            for chunk in resp.iter_content(1 << 16):
                h.update(chunk)
                out.write(chunk)
        _verify_digest(digest, h.hexdigest())

    def close(self) -> None:
        self.session.close()


def _verify_digest(declared: str, actual_hex: str) -> None:
    algo, _, value = declared.partition(":")
    if algo != "sha256":
        raise DigestMismatchError("unsupported digest algorithm %r" % algo)
    if value != actual_hex:
        raise DigestMismatchError("declared %s, downloaded sha256:%s"
                                  % (declared, actual_hex))
