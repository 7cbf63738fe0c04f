"""Synthetic data for tests and desk-scale experiments."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geom_align import DEFAULT_CANONICAL, SimilarityTransform, apply_points, warp
from .store import ProtocolRow, ProtocolTable, atomic_write_text, write_pnm, write_protocol
from .template_eval import Template


def clustered_descriptors(rng, n_classes=2, per_class=100, dim=16, sigma=0.05, separation=1.0):
    """Isotropic Gaussian clusters whose centers are ``separation`` apart pairwise.

    Centers are scaled standard basis vectors, so the pairwise distance is
    exactly ``separation``.
    """
    if n_classes > dim:
        raise ValueError("need dim >= n_classes for orthogonal centers")
    centers = np.eye(dim)[:n_classes] * (separation / math.sqrt(2.0))
    labels = np.repeat(np.arange(n_classes), per_class)
    X = centers[labels] + rng.normal(0.0, sigma, size=(len(labels), dim))
    return X, labels


def random_templates(rng, n_templates=100, n_subjects=20, dim=8, max_media=3, unprocessable_frac=0.0, noise=0.6):
    """Templates around per-subject centers; a fraction are emptied."""
    centers = rng.normal(size=(n_subjects, dim))
    out = []
    subjects = rng.integers(n_subjects, size=n_templates)
    subjects[: min(n_subjects, n_templates)] = np.arange(min(n_subjects, n_templates))
    n_bad = int(round(unprocessable_frac * n_templates))
    bad = set(rng.choice(n_templates, size=n_bad, replace=False).tolist()) if n_bad else set()
    for i, s in enumerate(subjects):
        k = int(rng.integers(1, max_media + 1))
        media = [] if i in bad else [centers[s] + noise * rng.normal(size=dim) for _ in range(k)]
        out.append(Template(f"t{i:04d}", f"s{s:03d}", media))
    return out


def smooth_texture(rng, h, w, sigma=3.0):
    tex = ndimage.gaussian_filter(rng.random((h, w)), sigma)
    tex -= tex.min()
    return tex / max(tex.max(), 1e-12)


def blob_image(rng, landmarks, size=64, radius=2.5, noise=0.05):
    """Gray image with a bright Gaussian blob at each landmark over low texture."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = 0.25 * smooth_texture(rng, size, size)
    for x, y in np.asarray(landmarks).reshape(-1, 2):
        img += 0.7 * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * radius**2))
    img += noise * rng.normal(size=img.shape)
    return np.clip(img, 0.0, 1.0)[:, :, None]


def landmark_dataset(rng, n=200, size=64, base=((20.0, 24.0), (44.0, 24.0), (32.0, 42.0)), jitter=3.0):
    """Blob images whose landmark sets are randomly scaled/rotated/shifted copies of ``base``."""
    base = np.asarray(base, dtype=np.float64)
    c = base.mean(axis=0)
    images, shapes = [], []
    for _ in range(n):
        t = SimilarityTransform(
            float(rng.uniform(0.9, 1.1)), float(rng.uniform(-0.15, 0.15)), tuple(rng.uniform(-jitter, jitter, 2))
        )
        pts = apply_points(t, base - c) + c
        shapes.append(pts)
        images.append(blob_image(rng, pts, size))
    return images, shapes


def subject_face(rng, size=100, canonical=DEFAULT_CANONICAL):
    """A canonical-frame RGB 'face' with dark spots at the eyes and nose."""
    face = np.stack([smooth_texture(rng, size, size, 4.0) for _ in range(3)], axis=2) * 0.6 + 0.2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for x, y in canonical:
        face *= 1.0 - 0.6 * np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * 3.0**2))[:, :, None]
    return face


def render_media(rng, face, canonical=DEFAULT_CANONICAL, out_size=128, noise=0.03):
    """Place a canonical face into a larger image under a random similarity.

    Returns the image and the landmark positions in it.
    """
    scale = float(rng.uniform(0.8, 1.1))
    rot = float(rng.uniform(-0.2, 0.2))
    shift = rng.uniform(-6, 6, 2) + (out_size - 100 * scale) / 2.0
    t = SimilarityTransform(scale, rot, tuple(shift))
    img = warp(face, t, (out_size, out_size))
    img = np.clip(img + noise * rng.normal(size=img.shape), 0.0, 1.0)
    return img, apply_points(t, canonical)


def write_face_dataset(root, rng, n_subjects=6, media_per_subject=4, canonical=DEFAULT_CANONICAL, n_splits=1,
                       train_frac=0.5):
    """Write PPM media, a protocol with landmarks, and per-split eval files.

    Layout::

        root/images/<subject>_<k>.ppm
        root/protocol.csv                  all media, one template per media
        root/split<i>/train.csv            training templates
        root/split<i>/verify.csv, pairs.csv, gallery.csv, probe.csv
    """
    root = Path(root)
    rows = []
    for s in range(n_subjects):
        face = subject_face(rng, canonical=canonical)
        for k in range(media_per_subject):
            img, lm = render_media(rng, face, canonical)
            name = f"s{s:02d}_{k}.ppm"
            write_pnm(root / "images" / name, img)
            lm_t = tuple((float(round(x, 6)), float(round(y, 6))) for x, y in lm)
            rows.append(ProtocolRow(f"s{s:02d}_{k}", f"s{s:02d}", name, lm_t))
    write_protocol(ProtocolTable(rows), root / "protocol.csv")
    for i in range(1, n_splits + 1):
        split = root / f"split{i}"
        order = rng.permutation(n_subjects)
        n_train = max(2, int(round(train_frac * n_subjects)))
        train_subj = {f"s{s:02d}" for s in order[:n_train]}
        test_subj = [f"s{s:02d}" for s in sorted(order[n_train:])]
        write_protocol(ProtocolTable([r for r in rows if r.subject_id in train_subj]), split / "train.csv")
        test_rows = [r for r in rows if r.subject_id in test_subj]
        # gallery: first two media of each test subject as one template; probes: the rest
        gallery, probe = [], []
        for r in test_rows:
            k = int(r.media_path.split("_")[1].split(".")[0])
            if k < 2:
                gallery.append(ProtocolRow(f"g_{r.subject_id}", r.subject_id, r.media_path, r.landmarks))
            else:
                probe.append(ProtocolRow(f"p_{r.template_id}", r.subject_id, r.media_path, r.landmarks))
        write_protocol(ProtocolTable(gallery), split / "gallery.csv")
        write_protocol(ProtocolTable(probe), split / "probe.csv")
        write_protocol(ProtocolTable(test_rows), split / "verify.csv")
        ids = [r.template_id for r in test_rows]
        lines = ["template_id_1,template_id_2"]
        lines += [f"{a},{b}" for j, a in enumerate(ids) for b in ids[j + 1 :]]
        atomic_write_text(split / "pairs.csv", "\n".join(lines) + "\n")
    return root
