"""End-to-end training and evaluation.

The total loss is a strict sum of the active terms (heatmap, keypoint
identity, hand pose, object pose); per-step CSV logging preserves each term
at full precision so the sum can be re-checked bitwise.  For the first
`gt_keypoint_warmup_epochs` epochs tokens come from ground-truth joint
reprojections and ground-truth segmentation samples; afterwards from
predicted heatmap peaks and the predicted segmentation.

Training is single-threaded and deterministic: every random choice derives
from (config.seed, purpose key, epoch/step indices) through a SeedSequence,
so two runs with one seed produce bitwise-identical logs and a checkpoint
resume continues the exact step stream.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import frontend, ktformer, metrics, nn, objpose, posedec, skeleton, synthgen
from . import tensor as T

CORNER_LOSS_UNIT = 1e-3   # corner loss computed on meters

# seed-derivation keys
_K_MODEL, _K_DATA, _K_EPOCH, _K_AUG, _K_KPS, _K_EVAL = range(1, 7)


def rng_for(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(keys)))


class NanLossError(RuntimeError):
    def __init__(self, term, step):
        super().__init__(f"non-finite loss term {term!r} at step {step}; aborting "
                         f"(last saved checkpoint is retained)")
        self.term = term


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    representation: str = "jv"          # jv | 25d | angles
    object_branch: bool = True
    hand_mode: str = "inter"            # single | inter
    image_size: int = 64
    heatmap_size: int = 32
    d_app: int = 48
    d_pos: int = 16
    enc_layers: int = 2
    dec_layers: int = 2
    n_heads: int = 4
    n_hand: int = 64
    n_obj: int = 20
    gamma: float = 3.0
    sigma: float = 2.0
    nms_threshold_train: float = 0.05
    nms_threshold_eval: float = 0.25
    lr_transformer: float = 1e-4
    lr_backbone: float = 1e-5
    batch_size: int = 8
    epochs: int = 50
    max_steps: int = 0                  # 0: run all epochs
    gt_keypoint_warmup_epochs: int = 5
    disable_identity_loss: bool = False
    detr_style_tokens: bool = False
    augment: bool = True
    mirror_prob: float = 0.5
    rotate_deg: float = 30.0
    scale_range_lo: float = 0.8
    scale_range_hi: float = 1.2
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.representation not in posedec.REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.hand_mode not in ("single", "inter"):
            raise ValueError(f"unknown hand_mode {self.hand_mode!r}")
        if self.heatmap_size * 2 != self.image_size:
            raise ValueError("heatmap_size must be image_size / 2 for this backbone")
        if (self.d_app + self.d_pos) % self.n_heads != 0:
            raise ValueError("token width must be divisible by n_heads")

    @property
    def token_width(self):
        return self.d_app + self.d_pos

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def scene_config(self):
        return synthgen.SceneConfig(image_size=self.image_size, hand_mode=self.hand_mode,
                                    with_object=self.object_branch)


# ---------------------------------------------------------------------------
# model

class PoseModel(nn.Module):
    def __init__(self, config):
        self.config = config
        rng = rng_for(config.seed, _K_MODEL)
        spec = posedec.REPRESENTATIONS[config.representation]
        self.backbone = frontend.UNetBackbone(rng)
        self.token_builder = frontend.TokenBuilder(
            rng, self.backbone.pyramid_channels, config.d_app, config.d_pos, config.heatmap_size)
        d = config.token_width
        self.encoder = ktformer.Encoder(rng, d, config.enc_layers, config.n_heads, 4 * d)
        self.queries = ktformer.QuerySet(rng, d, spec.joints_per_hand, config.object_branch)
        self.decoder = ktformer.Decoder(rng, d, config.dec_layers, config.n_heads, 4 * d,
                                        spec.joint_dim, spec.extra_dim, config.object_branch)
        # DETR-style ablation: reduce flattened coarsest encoder cells instead
        self.detr_mlp = None
        if config.detr_style_tokens:
            c = self.backbone.pyramid_channels[0]
            self.detr_mlp = nn.MLP(rng, [c, 2 * config.d_app, 2 * config.d_app, config.d_app])

    def param_groups(self):
        """Two disjoint, exhaustive learning-rate groups."""
        backbone = [("backbone." + n, p) for n, p in self.backbone.params()]
        transformer = [("token_builder." + n, p) for n, p in self.token_builder.params()]
        transformer += [("encoder." + n, p) for n, p in self.encoder.params()]
        transformer += [("queries." + n, p) for n, p in self.queries.params()]
        transformer += [("decoder." + n, p) for n, p in self.decoder.params()]
        if self.detr_mlp is not None:
            transformer += [("detr_mlp." + n, p) for n, p in self.detr_mlp.params()]
        return {"backbone": backbone, "transformer": transformer}

    def named_params(self):
        out = []
        for group in self.param_groups().values():
            out.extend(group)
        return out


def detr_style_tokens(pyramid_sample, model):
    """Flatten the coarsest encoder map into one token per cell: channels
    through a 3-layer MLP to d_app, plus the cell-center positional tail."""
    coarse = pyramid_sample[0]
    c, h, w = coarse.data.shape
    feats = T.transpose(T.reshape(coarse, (c, h * w)))
    appearance = model.detr_mlp(feats)
    builder = model.token_builder
    kps = [frontend.Keypoint(uv=((x + 0.5) / w, (y + 0.5) / h), score=1.0,
                             source=frontend.HAND_SOURCE)
           for y in range(h) for x in range(w)]
    pos = np.stack([frontend.positional_encoding(kp.uv, builder.d_pos, builder.max_cycles)
                    for kp in kps])
    matrix = T.concat([appearance, T.const(pos)], axis=1)
    tokens = [frontend.KeypointToken(
        appearance=T.reshape(T.narrow(appearance, 0, i, 1), (builder.d_app,)),
        positional=pos[i],
        combined=T.reshape(T.narrow(matrix, 0, i, 1), (builder.d_app + builder.d_pos,)),
        keypoint=kp) for i, kp in enumerate(kps)]
    return frontend.TokenSet(tokens, matrix, builder.d_app, builder.d_pos)


# ---------------------------------------------------------------------------
# keypoint source (staged)

def keypoint_source(epoch, config, sample, pred_heatmap=None, pred_segmap=None, kp_seed=0):
    """Keypoints for token building: ground truth during warmup epochs,
    predicted heatmap peaks and segmentation samples afterwards."""
    hm = config.heatmap_size
    if epoch < config.gt_keypoint_warmup_epochs:
        kps = []
        j_hm = synthgen.scale_coords(sample.joints2d, sample.image.shape[-1], hm)
        for h in range(2):
            if not sample.hands_present[h]:
                continue
            for j in range(21):
                if sample.visibility[h, j]:
                    u = (j_hm[h, j, 0] + 0.5) / hm
                    v = (j_hm[h, j, 1] + 0.5) / hm
                    kps.append(frontend.Keypoint(
                        uv=(min(max(u, 0.0), 1.0), min(max(v, 0.0), 1.0)),
                        score=1.0, source=frontend.HAND_SOURCE))
        if config.object_branch and sample.object_present:
            gt_mask = synthgen.object_segmentation_mask(sample, hm)
            kps.extend(frontend.sample_object_keypoints(gt_mask, config.n_obj, kp_seed))
        return kps
    kps = frontend.nms_peaks(pred_heatmap, config.n_hand, config.nms_threshold_train)
    if config.object_branch:
        kps.extend(frontend.sample_object_keypoints(pred_segmap, config.n_obj, kp_seed))
    return kps


def build_sample_tokens(model, config, sample_pyramid, keypoints):
    if config.detr_style_tokens:
        return detr_style_tokens(sample_pyramid, model)
    return frontend.build_tokens(keypoints, sample_pyramid, model.token_builder)


def identity_targets(config, sample, token_set):
    """Association targets at heatmap resolution; in DETR mode background
    cells whose center lands on the object mask get the object class."""
    hm = config.heatmap_size
    j_hm = synthgen.scale_coords(sample.joints2d, sample.image.shape[-1], hm)
    valid = np.repeat(sample.hands_present[:, None], 21, axis=1)
    targets = ktformer.associate_keypoints(token_set.keypoints, j_hm, valid,
                                           config.gamma, (hm, hm))
    if config.detr_style_tokens and config.object_branch and sample.object_present:
        mask = synthgen.object_segmentation_mask(sample, hm)[0]
        for i, kp in enumerate(token_set.keypoints):
            if targets[i] != ktformer.BACKGROUND_CLASS:
                continue
            x = min(hm - 1, max(0, int(round(kp.uv[0] * hm - 0.5))))
            y = min(hm - 1, max(0, int(round(kp.uv[1] * hm - 0.5))))
            if mask[y, x] >= 0.5:
                targets[i] = ktformer.OBJECT_CLASS
    return targets


# ---------------------------------------------------------------------------
# loss assembly

def total_loss(components):
    """Strict sum of the present loss terms, in logging column order."""
    out = None
    for _, term in components:
        if term is None:
            continue
        out = term if out is None else T.add(out, term)
    return out


def _mean_tensors(terms):
    if not terms:
        return None
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return T.mul(acc, 1.0 / len(terms))


def object_pose_loss(raw_layers, sample, objects):
    """Per-layer corner loss (meters) against the pose relative to the
    right-hand root, averaged over decoder layers."""
    model = objects[sample.object_id]
    gt_rel = sample.object_pose.copy()
    gt_rel[:3, 3] = gt_rel[:3, 3] - sample.joints3d[0, 0]
    sym = model.symmetry_rotations
    per_layer = []
    for raw in raw_layers:
        out = objpose.object_branch_outputs(raw)
        per_layer.append(objpose.symmetry_corner_loss(
            (out.rotation_matrix(), out.translation_mm), gt_rel, model.corners, sym,
            unit_scale=CORNER_LOSS_UNIT))
    return _mean_tensors(per_layer)


def forward_sample(model, config, sample, pyramid_i, keypoints, objects):
    """Tokens -> encoder -> decoder -> per-sample loss terms.

    Returns dict with tensors l_ki / l_pose / l_obj (missing keys mean the
    term does not apply to this sample) plus the decoded last-layer pose.
    """
    token_set = build_sample_tokens(model, config, pyramid_i, keypoints)
    encoded, id_logits, _ = model.encoder(token_set.matrix)
    out = {}
    if not config.disable_identity_loss:
        targets = identity_targets(config, sample, token_set)
        out["l_ki"] = ktformer.identity_loss(id_logits, targets)
        out["id_targets"] = targets
        out["id_logits"] = id_logits
    raw_layers, cross = model.decoder(model.queries, encoded)
    gt = posedec.ground_truth(sample, config.heatmap_size)
    per_layer = [posedec.pose_loss(config.representation,
                                   posedec.decode(config.representation, raw, config.heatmap_size),
                                   gt)
                 for raw in raw_layers]
    out["l_pose"] = _mean_tensors(per_layer)
    if config.object_branch and sample.object_present:
        try:
            out["l_obj"] = object_pose_loss(raw_layers, sample, objects)
        except objpose.DegenerateRotationError:
            pass  # skip the term for this sample; heads re-enter sane range
    out["decoded"] = posedec.decode(config.representation, raw_layers[-1], config.heatmap_size)
    out["raw_last"] = raw_layers[-1]
    out["cross_attention"] = cross
    out["token_set"] = token_set
    return out


# ---------------------------------------------------------------------------
# trainer

class Trainer:
    def __init__(self, config, samples, objects=synthgen.DEFAULT_OBJECTS):
        if not samples:
            raise ValueError("empty training set")
        self.config = config
        self.samples = list(samples)
        self.objects = objects
        self.model = PoseModel(config)
        groups = self.model.param_groups()
        self._check_partition(groups)
        self.opts = {
            "backbone": T.Adam([p for _, p in groups["backbone"]], config.lr_backbone),
            "transformer": T.Adam([p for _, p in groups["transformer"]], config.lr_transformer),
        }
        self.global_step = 0
        self.skipped_samples = 0
        self.log_rows = []

    @staticmethod
    def _check_partition(groups):
        seen = set()
        for group in groups.values():
            for name, p in group:
                if id(p) in seen:
                    raise CheckpointError(f"parameter {name} assigned to two groups")
                seen.add(id(p))

    def loss_columns(self):
        cols = ["l_h"]
        if not self.config.disable_identity_loss:
            cols.append("l_ki")
        cols.append("l_pose")
        if self.config.object_branch:
            cols.append("l_obj")
        return cols

    @property
    def steps_per_epoch(self):
        return (len(self.samples) + self.config.batch_size - 1) // self.config.batch_size

    def total_planned_steps(self, max_steps=None):
        planned = self.config.epochs * self.steps_per_epoch
        cap = max_steps if max_steps is not None else (self.config.max_steps or None)
        return min(planned, cap) if cap else planned

    def _batch(self, epoch, step_in_epoch):
        order = rng_for(self.config.seed, _K_EPOCH, epoch).permutation(len(self.samples))
        b = self.config.batch_size
        idx = order[step_in_epoch * b:(step_in_epoch + 1) * b]
        return [self.samples[i] for i in idx]

    def _augment(self, sample, epoch, step_in_epoch, slot):
        cfg = self.config
        rng = rng_for(cfg.seed, _K_AUG, epoch, step_in_epoch, slot)
        out = synthgen.augment(sample, "rotate",
                               magnitude=rng.uniform(-cfg.rotate_deg, cfg.rotate_deg))
        out = synthgen.augment(out, "scale",
                               magnitude=rng.uniform(cfg.scale_range_lo, cfg.scale_range_hi))
        if rng.uniform() < cfg.mirror_prob:
            out = synthgen.augment(out, "mirror")
        return out

    def train_step(self):
        cfg = self.config
        epoch = self.global_step // self.steps_per_epoch
        sie = self.global_step % self.steps_per_epoch
        batch = self._batch(epoch, sie)
        if cfg.augment:
            batch = [self._augment(s, epoch, sie, i) for i, s in enumerate(batch)]

        hm = cfg.heatmap_size
        gt_heat = np.stack([synthgen.gaussian_heatmap(
            synthgen.scale_coords(s.joints2d.reshape(-1, 2), cfg.image_size, hm),
            (s.visibility & s.hands_present[:, None]).reshape(-1),
            cfg.sigma, (hm, hm)) for s in batch])
        gt_seg = np.stack([synthgen.object_segmentation_mask(s, hm) for s in batch]) \
            if cfg.object_branch else None

        with T.Tape() as tape:
            images = T.const(np.stack([s.image for s in batch]))
            net = self.model.backbone(images)
            l_h = frontend.heatmap_loss(net["heatmap"], gt_heat)
            if cfg.object_branch:
                l_h = T.add(l_h, frontend.heatmap_loss(net["segmap"], gt_seg))

            ki_terms, pose_terms, obj_terms = [], [], []
            for i, s in enumerate(batch):
                kp_seed = int(rng_for(cfg.seed, _K_KPS, epoch, sie, i).integers(2 ** 31))
                kps = keypoint_source(epoch, cfg, s,
                                      pred_heatmap=net["heatmap"].data[i, 0],
                                      pred_segmap=net["segmap"].data[i, 0],
                                      kp_seed=kp_seed)
                if not kps:
                    self.skipped_samples += 1
                    continue
                pyr = frontend.pyramid_for_sample(net["pyramid"], i)
                out = forward_sample(self.model, cfg, s, pyr, kps, self.objects)
                if "l_ki" in out:
                    ki_terms.append(out["l_ki"])
                pose_terms.append(out["l_pose"])
                if "l_obj" in out:
                    obj_terms.append(out["l_obj"])

            components = [("l_h", l_h)]
            if not cfg.disable_identity_loss:
                components.append(("l_ki", _mean_tensors(ki_terms)))
            components.append(("l_pose", _mean_tensors(pose_terms)))
            if cfg.object_branch:
                components.append(("l_obj", _mean_tensors(obj_terms)))
            total = total_loss(components)

            row = {"step": self.global_step}
            for name, term in components:
                val = float(term.data) if term is not None else 0.0
                if not np.isfinite(val):
                    raise NanLossError(name, self.global_step)
                row[name] = val if term is not None else 0.0
            row["total"] = float(total.data)
            if not np.isfinite(row["total"]):
                raise NanLossError("total", self.global_step)

            tape.backward(total)
        for opt in self.opts.values():
            opt.step()
            opt.zero_grad()
        self.global_step += 1
        self.log_rows.append(row)
        return row

    def run(self, max_steps=None, checkpoint_path=None, log_path=None, progress=None):
        target = self.total_planned_steps(max_steps)
        while self.global_step < target:
            row = self.train_step()
            if progress:
                progress(row)
            if checkpoint_path and self.config.checkpoint_every \
                    and self.global_step % self.config.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, self)
                if log_path:
                    self.write_log(log_path)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, self)
        if log_path:
            self.write_log(log_path)
        return self.log_rows

    def write_log(self, path):
        cols = ["step"] + self.loss_columns() + ["total"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in self.log_rows:
                writer.writerow([row["step"]] + [repr(row[c]) for c in cols[1:]])


def train(config, samples, out_dir=None, max_steps=None, progress=None):
    """Train from scratch; returns the Trainer (holding the final model and
    the in-memory log)."""
    trainer = Trainer(config, samples)
    ckpt = f"{out_dir}/checkpoint.kpfc" if out_dir else None
    log = f"{out_dir}/trainlog.csv" if out_dir else None
    trainer.run(max_steps=max_steps, checkpoint_path=ckpt, log_path=log, progress=progress)
    return trainer


# ---------------------------------------------------------------------------
# checkpoint binary format

CKPT_MAGIC = b"KPFC"
CKPT_VERSION = 1
_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


def _write_array(fh, name, arr):
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES[arr.dtype]
    nb = name.encode()
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<BB", code, arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.tobytes())


def _read_array(fh):
    raw = fh.read(2)
    if len(raw) < 2:
        raise CheckpointError("truncated checkpoint (array name)")
    (nlen,) = struct.unpack("<H", raw)
    name = fh.read(nlen).decode()
    code, ndim = struct.unpack("<BB", fh.read(2))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    dtype = np.dtype(_DTYPES[code])
    n = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
    buf = fh.read(n)
    if len(buf) < n:
        raise CheckpointError(f"truncated checkpoint (array {name})")
    return name, np.frombuffer(buf, dtype=dtype).reshape(shape).copy()


def save_checkpoint(path, trainer):
    cfg_json = trainer.config.to_json().encode()
    arrays = []
    for name, p in trainer.model.named_params():
        arrays.append(("param/" + name, p.data))
    for gname, opt in trainer.opts.items():
        state = opt.state or {"m": [np.zeros_like(p.data) for p in opt.params],
                              "v": [np.zeros_like(p.data) for p in opt.params],
                              "t": 0}
        arrays.append((f"adam/{gname}/t", np.array([state["t"]], dtype=np.int64)))
        for i, m in enumerate(state["m"]):
            arrays.append((f"adam/{gname}/m/{i}", m))
        for i, v in enumerate(state["v"]):
            arrays.append((f"adam/{gname}/v/{i}", v))
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        fh.write(trainer.config.digest().encode())
        fh.write(struct.pack("<QQI", trainer.global_step, trainer.skipped_samples, len(arrays)))
        for name, arr in arrays:
            _write_array(fh, name, arr)


def load_checkpoint(path, samples, objects=synthgen.DEFAULT_OBJECTS):
    """Rebuild a Trainer (model + optimizer state + counters) bitwise."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}, expected {CKPT_MAGIC!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CKPT_VERSION:
            raise CheckpointError(f"checkpoint version {version}, expected {CKPT_VERSION}")
        (clen,) = struct.unpack("<I", fh.read(4))
        config = TrainConfig.from_dict(json.loads(fh.read(clen).decode()))
        digest = fh.read(64).decode()
        if digest != config.digest():
            raise CheckpointError("checkpoint config digest mismatch")
        global_step, skipped, count = struct.unpack("<QQI", fh.read(20))
        arrays = dict(_read_array(fh) for _ in range(count))

    trainer = Trainer(config, samples, objects)
    trainer.global_step = int(global_step)
    trainer.skipped_samples = int(skipped)
    for name, p in trainer.model.named_params():
        key = "param/" + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        if arrays[key].shape != p.data.shape:
            raise CheckpointError(f"checkpoint parameter {name} has shape "
                                  f"{arrays[key].shape}, expected {p.data.shape}")
        p.data = arrays[key]
    for gname, opt in trainer.opts.items():
        t = int(arrays[f"adam/{gname}/t"][0])
        opt.state = {
            "m": [arrays[f"adam/{gname}/m/{i}"] for i in range(len(opt.params))],
            "v": [arrays[f"adam/{gname}/v/{i}"] for i in range(len(opt.params))],
            "t": t,
        }
    return trainer


# ---------------------------------------------------------------------------
# evaluation

def _eval_keypoints(model, config, sample, net, i, idx):
    kp_seed = int(rng_for(config.seed, _K_EVAL, idx).integers(2 ** 31))
    kps = frontend.nms_peaks(net["heatmap"].data[i, 0], config.n_hand,
                             config.nms_threshold_eval)
    if config.object_branch:
        kps.extend(frontend.sample_object_keypoints(net["segmap"].data[i, 0],
                                                    config.n_obj, kp_seed))
    return kps


def evaluate(trainer_or_model, samples, objects=synthgen.DEFAULT_OBJECTS,
             collect_attention=False):
    """Run the full pipeline over samples and aggregate metrics.

    Pure: repeated calls on the same model and data return identical
    reports.  Returns (MetricReport, per-sample records).
    """
    model = trainer_or_model.model if isinstance(trainer_or_model, Trainer) else trainer_or_model
    config = model.config
    records = []
    with T.no_grad():
        for idx, sample in enumerate(samples):
            rec = {"index": idx, "interacting": sample.interacting,
                   "object_name": objects[sample.object_id].name if sample.object_id >= 0 else None}
            net = model.backbone(T.const(sample.image[None]))
            kps = _eval_keypoints(model, config, sample, net, 0, idx)
            if not kps and not config.detr_style_tokens:
                rec["skipped"] = True
                records.append(rec)
                continue
            pyr = frontend.pyramid_for_sample(net["pyramid"], 0)
            out = forward_sample(model, config, sample, pyr, kps, objects)
            pred_joints, pred_t_lr = posedec.predictions_for_eval(
                config.representation, out["decoded"], sample, config.heatmap_size)
            gt = posedec.ground_truth(sample, config.heatmap_size)
            rec["hand_errors"] = [
                (pred_joints[h], sample.joints3d[h] - sample.joints3d[h, 0])
                for h in range(2) if sample.hands_present[h]]
            if sample.interacting:
                rec["t_lr"] = (pred_t_lr, gt.t_lr)
            if config.object_branch and sample.object_present and "obj_rot" in out["raw_last"]:
                try:
                    pred_pose = objpose.object_branch_outputs(out["raw_last"]).pose_numpy()
                    gt_rel = sample.object_pose.copy()
                    gt_rel[:3, 3] -= sample.joints3d[0, 0]
                    model_obj = objects[sample.object_id]
                    rec["mssd_mm"] = objpose.mssd(pred_pose, gt_rel, model_obj.corners,
                                                  model_obj.symmetry_rotations)
                except objpose.DegenerateRotationError:
                    pass
            if collect_attention:
                rec["attention"] = ktformer.export_cross_attention(
                    out["cross_attention"], out["token_set"].keypoints, model.queries)
                rec["keypoints"] = out["token_set"].keypoints
                rec["decoded"] = out["decoded"]
                rec["heatmap"] = net["heatmap"].data[0, 0].copy()
                rec["pred_joints"] = pred_joints
            records.append(rec)
    return metrics.compute_report(records), records


def identity_accuracy(trainer, samples, objects=synthgen.DEFAULT_OBJECTS):
    """Fraction of keypoints whose last-layer identity argmax matches the
    association target (evaluation keypoint source)."""
    model = trainer.model if isinstance(trainer, Trainer) else trainer
    config = model.config
    hit = total = 0
    with T.no_grad():
        for idx, sample in enumerate(samples):
            net = model.backbone(T.const(sample.image[None]))
            kps = _eval_keypoints(model, config, sample, net, 0, idx)
            if not kps:
                continue
            pyr = frontend.pyramid_for_sample(net["pyramid"], 0)
            token_set = build_sample_tokens(model, config, pyr, kps)
            _, id_logits, _ = model.encoder(token_set.matrix)
            targets = identity_targets(config, sample, token_set)
            pred = np.argmax(id_logits[-1].data, axis=1)
            hit += int((pred == targets).sum())
            total += len(targets)
    return hit / max(total, 1)


# ---------------------------------------------------------------------------
# ablations

ABLATIONS = (
    ("baseline", {}),
    ("no_identity_loss", {"disable_identity_loss": True}),
    ("detr_style", {"detr_style_tokens": True}),
)


def run_ablations(config, samples, eval_samples, out_dir, max_steps=None, progress=None):
    """Train baseline / no-L_KI / DETR-style on one shared seed; emit a
    comparison CSV.  Returns rows of (name, final losses, metrics)."""
    rows = []
    for name, overrides in ABLATIONS:
        cfg = replace(config, **overrides)
        trainer = Trainer(cfg, samples)
        trainer.run(max_steps=max_steps,
                    checkpoint_path=f"{out_dir}/{name}.kpfc" if out_dir else None,
                    log_path=f"{out_dir}/{name}_trainlog.csv" if out_dir else None,
                    progress=progress)
        report, _ = evaluate(trainer, eval_samples)
        last = trainer.log_rows[-1] if trainer.log_rows else {}
        rows.append({
            "run": name,
            "steps": trainer.global_step,
            "final_total_loss": last.get("total", float("nan")),
            "mpjpe_mm": report.mpjpe_mm,
            "mrrpe_mm": report.mrrpe_mm,
            "auc": report.auc,
            "mssd_cm": report.mssd_cm,
        })
    if out_dir:
        with open(f"{out_dir}/ablations.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# gradient-check suite (shared by the CLI and the acceptance tests)

def _leaf(values, key, rng, draw):
    return T.Tensor(values[key] if values else draw(rng), requires_grad=True, dtype=np.float64)


def _gc_conv(values, rng):
    x = _leaf(values, "x", rng, lambda r: r.standard_normal((1, 2, 6, 6)))
    w = _leaf(values, "w", rng, lambda r: 0.5 * r.standard_normal((3, 2, 3, 3)))
    b = _leaf(values, "b", rng, lambda r: 0.1 * r.standard_normal(3))
    return T.mean(T.relu(T.conv2d(x, w, b, stride=2, padding=1))), {"x": x, "w": w, "b": b}


def _gc_attention(values, rng):
    x = _leaf(values, "x", rng, lambda r: r.standard_normal((3, 8)))
    wq = _leaf(values, "wq", rng, lambda r: 0.5 * r.standard_normal((8, 8)))
    wk = _leaf(values, "wk", rng, lambda r: 0.5 * r.standard_normal((8, 8)))
    wv = _leaf(values, "wv", rng, lambda r: 0.5 * r.standard_normal((8, 8)))
    attn = T.softmax_last(T.mul(T.matmul(T.matmul(x, wq), T.transpose(T.matmul(x, wk))),
                                1.0 / np.sqrt(8)))
    return T.mean(T.attn_weighted_sum(attn, T.matmul(x, wv))), \
        {"x": x, "wq": wq, "wk": wk, "wv": wv}


def _gc_layer_norm(values, rng):
    x = _leaf(values, "x", rng, lambda r: r.standard_normal((3, 6)))
    g = _leaf(values, "g", rng, lambda r: r.uniform(0.5, 1.5, 6))
    b = _leaf(values, "b", rng, lambda r: 0.1 * r.standard_normal(6))
    return T.mean(T.mul(T.layer_norm(x, g, b), T.layer_norm(x, g, b))), {"x": x, "g": g, "b": b}


def _gc_bilinear(values, rng):
    fm = _leaf(values, "fm", rng, lambda r: r.standard_normal((3, 4, 4)))
    s1 = T.bilinear_sample(fm, (0.371, 0.642))
    s2 = T.bilinear_sample(fm, (0.93, 0.08))
    return T.mean(T.mul(T.concat([s1, s2], axis=0), T.concat([s2, s1], axis=0))), {"fm": fm}


_GC_SAMPLE = None


def _gc_gt(representation):
    global _GC_SAMPLE
    if _GC_SAMPLE is None:
        _GC_SAMPLE = synthgen.sample_scene(17, synthgen.SceneConfig())
    return posedec.ground_truth(_GC_SAMPLE, 32)


def _gc_pose_loss(representation):
    spec = posedec.REPRESENTATIONS[representation]

    def kink_margin(j, e):
        # smallest |pred - target| across the L1 terms; finite differences
        # are invalid within h of the |.| kink, so such draws are rejected
        with T.no_grad():
            pred = posedec.decode(representation,
                                  {"joints": T.const(j), "extra": T.const(e)}, 32)
            terms = posedec.loss_terms(representation, pred, _gc_gt(representation))
        return min(float(np.min(np.abs(p.data - t))) for _, p, t in terms)

    def build(values, rng):
        if values is None:
            for _ in range(64):
                j = 0.5 * rng.standard_normal((2 * spec.joints_per_hand, spec.joint_dim))
                e = 0.5 * rng.standard_normal(spec.extra_dim)
                if kink_margin(j, e) > 2e-3:
                    break
            values = {"joints": j, "extra": e}
        joints = _leaf(values, "joints", rng, lambda r: None)
        extra = _leaf(values, "extra", rng, lambda r: None)
        pred = posedec.decode(representation, {"joints": joints, "extra": extra}, 32)
        return posedec.pose_loss(representation, pred, _gc_gt(representation)), \
            {"joints": joints, "extra": extra}

    return build


def _gc_rot6d(values, rng):
    r6 = _leaf(values, "r6", rng, lambda r: r.standard_normal(6) + np.array([2, 0, 0, 0, 2, 0.0]))
    probe = np.arange(1.0, 10.0).reshape(3, 3) / 10.0
    return T.mean(T.mul(objpose.rot6d_to_matrix(r6), T.const(probe))), {"r6": r6}


def _gc_symmetry_corner(values, rng):
    r6 = _leaf(values, "r6", rng, lambda r: r.standard_normal(6) + np.array([2, 0, 0, 0, 2, 0.0]))
    t = _leaf(values, "t", rng, lambda r: 30.0 * r.standard_normal(3))
    gt_pose = objpose.pose_matrix(skeleton.rodrigues([0.4, -0.2, 0.9]), [20.0, -10.0, 5.0])
    corners = synthgen.DEFAULT_OBJECTS[0].corners
    sym = synthgen.DEFAULT_OBJECTS[0].symmetry_rotations
    loss = objpose.symmetry_corner_loss((objpose.rot6d_to_matrix(r6), t), gt_pose,
                                        corners, sym, unit_scale=1e-2)
    return loss, {"r6": r6, "t": t}


GRADCHECK_BUILDERS = {
    "conv2d": _gc_conv,
    "attention": _gc_attention,
    "layer_norm": _gc_layer_norm,
    "bilinear_sample": _gc_bilinear,
    "pose_loss_jv": _gc_pose_loss("jv"),
    "pose_loss_25d": _gc_pose_loss("25d"),
    "pose_loss_angles": _gc_pose_loss("angles"),
    "rot6d": _gc_rot6d,
    "symmetry_corner_loss": _gc_symmetry_corner,
}


def run_gradcheck_suite(trials=20, tolerance=1e-4, seed=123):
    """Finite-difference verification of every differentiable path; returns
    {name: max relative error over trials}."""
    results = {}
    for name, build in GRADCHECK_BUILDERS.items():
        worst = 0.0
        for t in range(trials):
            rep = T.grad_check(build, rng_for(seed, 6, t), tolerance=tolerance)
            worst = max(worst, rep.max_error)
        results[name] = worst
    return results
