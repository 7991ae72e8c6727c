//! The full fusion model: 2D backbone, dual sparse 3D streams, heatmap head,
//! query cross-attention and the detection heads, with a hand-written
//! backward pass through the whole chain.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::config::Config;
use crate::decoration::{decorate, decorate_backward, DecorationError, SampleSite};
use crate::detect_loss::{
    assign_targets, decode_box, gaussian_heatmap_target, heatmap_focal_loss, query_focal_loss,
    smooth_l1, total_loss, Assignment, Box3D, Detection, LossError, LossReport, REG_DIM,
};
use crate::geometry::{CalibRig, LidarPoint};
use crate::image::{
    backbone_backward, backbone_forward_traced, BackboneParams, BackboneTrace, FeatureMap2D,
    Image, ImageError,
};
use crate::nn::{sigmoid, Linear};
use crate::query_fusion::{
    cross_attention, cross_attention_backward, embed_category, fuse, fuse_backward,
    heatmap_head_backward, heatmap_head_forward, select_queries, select_queries_dense,
    AttentionParams, AttentionTrace, FusionError, HeatmapHeadParams, HeatmapHeadTrace,
    ObjectQuery,
};
use crate::sparse_conv::{
    bev_flatten, bev_flatten_backward, channel_concat, channel_concat_backward,
    sparse_conv_backward, sparse_relu_backward, sparse_relu_forward, strided_conv_forward,
    subm_conv_forward, BEVFeatureMap, SparseConvError, SparseConvLayer, SparseConvMode,
};
use crate::voxel::{build_voxel_features, voxel_feature_backward, voxelize, SparseTensor3D};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Decoration(#[from] DecorationError),
    #[error(transparent)]
    Sparse(#[from] SparseConvError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("object placement failed after {0} attempts")]
    PlacementFailure(usize),
    #[error("checkpoint config hash {got:#018x} does not match active config {expected:#018x}")]
    ConfigMismatch { expected: u64, got: u64 },
    #[error("checkpoint corrupt: {0}")]
    BadCheckpoint(String),
}

/// Four-layer sparse backbone: subm, strided, subm, strided, ReLU after each.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseStream {
    pub l1: SparseConvLayer,
    pub l2: SparseConvLayer,
    pub l3: SparseConvLayer,
    pub l4: SparseConvLayer,
}

impl SparseStream {
    pub fn seeded(c_in: usize, schedule: [usize; 4], seed: u64) -> Self {
        Self {
            l1: SparseConvLayer::seeded(c_in, schedule[0], SparseConvMode::Submanifold, seed),
            l2: SparseConvLayer::seeded(
                schedule[0],
                schedule[1],
                SparseConvMode::Strided,
                seed.wrapping_add(1),
            ),
            l3: SparseConvLayer::seeded(
                schedule[1],
                schedule[2],
                SparseConvMode::Submanifold,
                seed.wrapping_add(2),
            ),
            l4: SparseConvLayer::seeded(
                schedule[2],
                schedule[3],
                SparseConvMode::Strided,
                seed.wrapping_add(3),
            ),
        }
    }
}

/// Every trainable parameter of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone2d: BackboneParams,
    /// Lidar-feature stream, or the single shared stream when the
    /// two-stream flag is off.
    pub stream_a: SparseStream,
    /// Camera-feature stream; absent in single-stream mode.
    pub stream_b: Option<SparseStream>,
    pub heatmap_head: HeatmapHeadParams,
    pub attention: AttentionParams,
    pub cls_head: Linear,
    pub reg_head: Linear,
}

impl Model {
    pub fn seeded(cfg: &Config, seed: u64) -> Self {
        let c_bev = cfg.fused_bev_channels();
        let kv_in = if cfg.ablation.two_sparse_conv {
            cfg.stream_bev_channels()
        } else {
            c_bev
        };
        let q_in = c_bev
            + if cfg.ablation.category_embedding {
                cfg.k_classes
            } else {
                0
            };
        let head_in = cfg.fc_out + c_bev;
        let (a_in, b) = if cfg.ablation.two_sparse_conv {
            (
                4,
                Some(SparseStream::seeded(
                    cfg.c_img,
                    cfg.sparse_channels,
                    seed.wrapping_add(200),
                )),
            )
        } else {
            (4 + cfg.c_img, None)
        };
        Self {
            backbone2d: BackboneParams::seeded(cfg.c_img, seed.wrapping_add(10)),
            stream_a: SparseStream::seeded(a_in, cfg.sparse_channels, seed.wrapping_add(100)),
            stream_b: b,
            heatmap_head: HeatmapHeadParams::seeded(
                c_bev,
                cfg.head_hidden,
                cfg.k_classes,
                seed.wrapping_add(300),
            ),
            attention: AttentionParams::seeded(
                q_in,
                kv_in,
                cfg.d_model,
                cfg.fc_out,
                cfg.dropout,
                seed.wrapping_add(400),
            ),
            cls_head: Linear::seeded(head_in, cfg.k_classes, seed.wrapping_add(500)),
            reg_head: Linear::seeded(head_in, REG_DIM, seed.wrapping_add(501)),
        }
    }

    /// Visit every parameter block in a fixed name order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("attn.fc.bias", &self.attention.fc.bias);
        f("attn.fc.weight", &self.attention.fc.weight);
        f("attn.w_k.bias", &self.attention.w_k.bias);
        f("attn.w_k.weight", &self.attention.w_k.weight);
        f("attn.w_q.bias", &self.attention.w_q.bias);
        f("attn.w_q.weight", &self.attention.w_q.weight);
        f("attn.w_v.bias", &self.attention.w_v.bias);
        f("attn.w_v.weight", &self.attention.w_v.weight);
        for (name, c) in [
            ("backbone2d.conv1", &self.backbone2d.conv1),
            ("backbone2d.conv2", &self.backbone2d.conv2),
            ("backbone2d.conv3", &self.backbone2d.conv3),
            ("head.conv1", &self.heatmap_head.conv1),
            ("head.conv2", &self.heatmap_head.conv2),
        ] {
            f(&format!("{name}.bias"), &c.bias);
            f(&format!("{name}.kernel"), &c.kernel);
        }
        f("cls_head.bias", &self.cls_head.bias);
        f("cls_head.weight", &self.cls_head.weight);
        f("reg_head.bias", &self.reg_head.bias);
        f("reg_head.weight", &self.reg_head.weight);
        for (prefix, stream) in self.streams() {
            for (ln, l) in [
                ("l1", &stream.l1),
                ("l2", &stream.l2),
                ("l3", &stream.l3),
                ("l4", &stream.l4),
            ] {
                f(&format!("{prefix}.{ln}.bias"), &l.bias);
                f(&format!("{prefix}.{ln}.kernel"), &l.kernel);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("attn.fc.bias", &mut self.attention.fc.bias);
        f("attn.fc.weight", &mut self.attention.fc.weight);
        f("attn.w_k.bias", &mut self.attention.w_k.bias);
        f("attn.w_k.weight", &mut self.attention.w_k.weight);
        f("attn.w_q.bias", &mut self.attention.w_q.bias);
        f("attn.w_q.weight", &mut self.attention.w_q.weight);
        f("attn.w_v.bias", &mut self.attention.w_v.bias);
        f("attn.w_v.weight", &mut self.attention.w_v.weight);
        for (name, c) in [
            ("backbone2d.conv1", &mut self.backbone2d.conv1),
            ("backbone2d.conv2", &mut self.backbone2d.conv2),
            ("backbone2d.conv3", &mut self.backbone2d.conv3),
            ("head.conv1", &mut self.heatmap_head.conv1),
            ("head.conv2", &mut self.heatmap_head.conv2),
        ] {
            f(&format!("{name}.bias"), &mut c.bias);
            f(&format!("{name}.kernel"), &mut c.kernel);
        }
        f("cls_head.bias", &mut self.cls_head.bias);
        f("cls_head.weight", &mut self.cls_head.weight);
        f("reg_head.bias", &mut self.reg_head.bias);
        f("reg_head.weight", &mut self.reg_head.weight);
        let two = self.stream_b.is_some();
        let a_prefix = if two { "sparse.lidar" } else { "sparse.shared" };
        for (ln, l) in [
            ("l1", &mut self.stream_a.l1),
            ("l2", &mut self.stream_a.l2),
            ("l3", &mut self.stream_a.l3),
            ("l4", &mut self.stream_a.l4),
        ] {
            f(&format!("{a_prefix}.{ln}.bias"), &mut l.bias);
            f(&format!("{a_prefix}.{ln}.kernel"), &mut l.kernel);
        }
        if let Some(sb) = &mut self.stream_b {
            for (ln, l) in [
                ("l1", &mut sb.l1),
                ("l2", &mut sb.l2),
                ("l3", &mut sb.l3),
                ("l4", &mut sb.l4),
            ] {
                f(&format!("sparse.camera.{ln}.bias"), &mut l.bias);
                f(&format!("sparse.camera.{ln}.kernel"), &mut l.kernel);
            }
        }
    }

    fn streams(&self) -> Vec<(&'static str, &SparseStream)> {
        match &self.stream_b {
            Some(b) => vec![("sparse.lidar", &self.stream_a), ("sparse.camera", b)],
            None => vec![("sparse.shared", &self.stream_a)],
        }
    }
}

/// Named gradient accumulator mirroring the model parameter blocks.
#[derive(Debug, Clone, Default)]
pub struct GradStore(pub BTreeMap<String, Vec<f64>>);

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn slot(&mut self, name: &str, len: usize) -> &mut Vec<f64> {
        self.0
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; len])
    }

    pub fn add(&mut self, name: &str, values: &[f64]) {
        let slot = self.slot(name, values.len());
        for (o, &v) in slot.iter_mut().zip(values) {
            *o += v;
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(|v| v.as_slice())
    }
}

/// Intermediate activations of one sparse stream.
#[derive(Debug, Clone)]
pub struct StreamTrace {
    pub input: SparseTensor3D,
    pub s1: SparseTensor3D,
    pub r1: SparseTensor3D,
    pub s2: SparseTensor3D,
    pub r2: SparseTensor3D,
    pub s3: SparseTensor3D,
    pub r3: SparseTensor3D,
    pub s4: SparseTensor3D,
    pub r4: SparseTensor3D,
}

fn run_stream(input: SparseTensor3D, stream: &SparseStream) -> Result<StreamTrace, PipelineError> {
    let s1 = subm_conv_forward(&input, &stream.l1)?;
    let r1 = sparse_relu_forward(&s1);
    let s2 = strided_conv_forward(&r1, &stream.l2)?;
    let r2 = sparse_relu_forward(&s2);
    let s3 = subm_conv_forward(&r2, &stream.l3)?;
    let r3 = sparse_relu_forward(&s3);
    let s4 = strided_conv_forward(&r3, &stream.l4)?;
    let r4 = sparse_relu_forward(&s4);
    Ok(StreamTrace {
        input,
        s1,
        r1,
        s2,
        r2,
        s3,
        r3,
        s4,
        r4,
    })
}

/// Backward through one stream; grads land in `gs` under `prefix`, the input
/// cotangent is returned.
fn stream_backward(
    stream: &SparseStream,
    prefix: &str,
    trace: &StreamTrace,
    bev_cot: &BEVFeatureMap,
    gs: &mut GradStore,
) -> Result<SparseTensor3D, PipelineError> {
    let r4_cot = bev_flatten_backward(&trace.r4, bev_cot);
    let s4_cot = sparse_relu_backward(&trace.s4, &r4_cot);
    let g4 = sparse_conv_backward(&trace.r3, &stream.l4, &trace.s4, &s4_cot)?;
    gs.add(&format!("{prefix}.l4.kernel"), &g4.kernel);
    gs.add(&format!("{prefix}.l4.bias"), &g4.bias);
    let s3_cot = sparse_relu_backward(&trace.s3, &g4.input);
    let g3 = sparse_conv_backward(&trace.r2, &stream.l3, &trace.s3, &s3_cot)?;
    gs.add(&format!("{prefix}.l3.kernel"), &g3.kernel);
    gs.add(&format!("{prefix}.l3.bias"), &g3.bias);
    let s2_cot = sparse_relu_backward(&trace.s2, &g3.input);
    let g2 = sparse_conv_backward(&trace.r1, &stream.l2, &trace.s2, &s2_cot)?;
    gs.add(&format!("{prefix}.l2.kernel"), &g2.kernel);
    gs.add(&format!("{prefix}.l2.bias"), &g2.bias);
    let s1_cot = sparse_relu_backward(&trace.s1, &g2.input);
    let g1 = sparse_conv_backward(&trace.input, &stream.l1, &trace.s1, &s1_cot)?;
    gs.add(&format!("{prefix}.l1.kernel"), &g1.kernel);
    gs.add(&format!("{prefix}.l1.bias"), &g1.bias);
    Ok(g1.input)
}

/// Concatenate two sparse tensors channel-wise; they must share coordinates.
fn sparse_channel_concat(a: &SparseTensor3D, b: &SparseTensor3D) -> SparseTensor3D {
    debug_assert_eq!(a.coords, b.coords);
    let c = a.channels + b.channels;
    let mut out = SparseTensor3D {
        coords: a.coords.clone(),
        features: vec![0.0; a.len() * c],
        dims: a.dims,
        channels: c,
    };
    for i in 0..a.len() {
        let row = out.row_mut(i);
        row[..a.channels].copy_from_slice(a.row(i));
        row[a.channels..].copy_from_slice(b.row(i));
    }
    out
}

/// Everything the backward pass and the heads need from one forward run.
pub struct ForwardTrace {
    pub image: Image,
    pub fmap: FeatureMap2D,
    pub backbone: Option<BackboneTrace>,
    pub sites: Vec<SampleSite>,
    pub groups: BTreeMap<[usize; 3], Vec<usize>>,
    pub n_points: usize,
    pub stream_a: StreamTrace,
    pub stream_b: Option<StreamTrace>,
    pub fused_bev: BEVFeatureMap,
    /// Key/value source for the attention block; equals the fused map in
    /// single-stream mode.
    pub camera_bev: BEVFeatureMap,
    pub head: HeatmapHeadTrace,
    pub queries: Vec<ObjectQuery>,
    pub embedded: Vec<Vec<f64>>,
    pub attn: AttentionTrace,
    pub fused_q: Vec<Vec<f64>>,
    pub cls_logits: Vec<Vec<f64>>,
    pub reg: Vec<Vec<f64>>,
}

impl Model {
    /// Full pipeline forward over one scene.
    pub fn forward(
        &self,
        cfg: &Config,
        points: &[LidarPoint],
        image: &Image,
        rig: &CalibRig,
        training: bool,
        dropout_seed: u64,
    ) -> Result<ForwardTrace, PipelineError> {
        let (fmap, backbone) = if cfg.ablation.decoration {
            let tr = backbone_forward_traced(image, &self.backbone2d)?;
            (tr.out.clone(), Some(tr))
        } else {
            (
                FeatureMap2D::zeros(cfg.image_h / 4, cfg.image_w / 4, cfg.c_img),
                None,
            )
        };
        let (decorated, sites) = decorate(points, &fmap, rig, (cfg.image_h, cfg.image_w))?;
        let spec = cfg.spec();
        let cap = if cfg.max_points_per_voxel == 0 {
            None
        } else {
            Some(cfg.max_points_per_voxel)
        };
        let groups = voxelize(&decorated, &spec, cap);
        let (lidar_in, camera_in) = build_voxel_features(&decorated, &groups, &spec, cfg.c_img);

        let (stream_a, stream_b, fused_bev, camera_bev) = if let Some(sb) = &self.stream_b {
            let ta = run_stream(lidar_in, &self.stream_a)?;
            let tb = run_stream(camera_in, sb)?;
            let bev_a = bev_flatten(&ta.r4);
            let bev_b = bev_flatten(&tb.r4);
            let fused = channel_concat(&bev_a, &bev_b)?;
            (ta, Some(tb), fused, bev_b)
        } else {
            let joint = sparse_channel_concat(&lidar_in, &camera_in);
            let ta = run_stream(joint, &self.stream_a)?;
            let fused = bev_flatten(&ta.r4);
            let cam = fused.clone();
            (ta, None, fused, cam)
        };

        let head = heatmap_head_forward(&fused_bev, &self.heatmap_head);
        let queries = if cfg.ablation.heatmap_init {
            select_queries(&head.heatmap, cfg.n_queries)
        } else {
            select_queries_dense(&head.heatmap, cfg.n_queries)
        };
        let embedded: Result<Vec<_>, _> = queries
            .iter()
            .map(|q| {
                embed_category(
                    q,
                    fused_bev.cell(q.i, q.j),
                    cfg.k_classes,
                    cfg.ablation.category_embedding,
                )
            })
            .collect();
        let embedded = embedded?;
        let attn = cross_attention(&embedded, &camera_bev, &self.attention, training, dropout_seed)?;
        let fused_q = fuse(&attn.output, &fused_bev, &queries, &self.attention);
        let cls_logits: Vec<Vec<f64>> = fused_q.iter().map(|x| self.cls_head.forward(x)).collect();
        let reg: Vec<Vec<f64>> = fused_q.iter().map(|x| self.reg_head.forward(x)).collect();
        Ok(ForwardTrace {
            image: image.clone(),
            fmap,
            backbone,
            sites,
            groups,
            n_points: points.len(),
            stream_a,
            stream_b,
            fused_bev,
            camera_bev,
            head,
            queries,
            embedded,
            attn,
            fused_q,
            cls_logits,
            reg,
        })
    }

    /// Loss over one traced forward; the returned cotangents feed
    /// [`Model::backward`].
    pub fn loss(
        &self,
        cfg: &Config,
        trace: &ForwardTrace,
        gt: &[(Box3D, usize)],
    ) -> Result<(LossReport, LossGrads), PipelineError> {
        let (bx, by, _) = cfg.bev_dims();
        let cell = cfg.bev_cell_size();
        let origin = cfg.bev_origin();
        let target = gaussian_heatmap_target(gt, bx, by, cfg.k_classes, cell, origin);
        let (l_heatmap, heatmap_grad) = heatmap_focal_loss(&trace.head.heatmap, &target)?;

        let assignments = assign_targets(
            &trace.queries,
            gt,
            cell,
            origin,
            by,
            cfg.assign_radius,
        );
        let mut cls_targets = vec![vec![0.0; cfg.k_classes]; trace.queries.len()];
        let mut reg_pred = Vec::new();
        let mut reg_target = Vec::new();
        let mut matched = Vec::new();
        for (qi, a) in assignments.iter().enumerate() {
            if let Assignment::Matched { target, .. } = a {
                cls_targets[qi][trace.queries[qi].class_id] = 1.0;
                reg_pred.extend_from_slice(&trace.reg[qi]);
                reg_target.extend_from_slice(&target.to_array());
                matched.push(qi);
            }
        }
        let (l_query_cls, cls_grads) = query_focal_loss(&trace.cls_logits, &cls_targets)?;
        let (l_reg, reg_grad_flat) = smooth_l1(&reg_pred, &reg_target)?;
        let report = total_loss(l_heatmap, l_query_cls, l_reg, cfg.reg_weight);

        let mut reg_grads = vec![vec![0.0; REG_DIM]; trace.queries.len()];
        for (mi, &qi) in matched.iter().enumerate() {
            for d in 0..REG_DIM {
                reg_grads[qi][d] = cfg.reg_weight * reg_grad_flat[mi * REG_DIM + d];
            }
        }
        Ok((
            report,
            LossGrads {
                heatmap_probs: heatmap_grad,
                cls_logits: cls_grads,
                reg: reg_grads,
            },
        ))
    }

    /// Backward through the whole pipeline. Returns the gradient store; the
    /// 2D backbone is skipped when frozen by the e2e flag or unused because
    /// decoration is off.
    pub fn backward(
        &self,
        cfg: &Config,
        trace: &ForwardTrace,
        lg: &LossGrads,
        training: bool,
    ) -> Result<GradStore, PipelineError> {
        let mut gs = GradStore::new();
        let nq = trace.queries.len();
        let head_in = self.cls_head.in_dim;
        let mut gw_cls = vec![0.0; self.cls_head.weight.len()];
        let mut gb_cls = vec![0.0; self.cls_head.bias.len()];
        let mut gw_reg = vec![0.0; self.reg_head.weight.len()];
        let mut gb_reg = vec![0.0; self.reg_head.bias.len()];
        let mut fq_cots = vec![vec![0.0; head_in]; nq];
        for qi in 0..nq {
            let g1 = self
                .cls_head
                .backward(&trace.fused_q[qi], &lg.cls_logits[qi], &mut gw_cls, &mut gb_cls);
            let g2 = self
                .reg_head
                .backward(&trace.fused_q[qi], &lg.reg[qi], &mut gw_reg, &mut gb_reg);
            for (o, (a, b)) in fq_cots[qi].iter_mut().zip(g1.iter().zip(&g2)) {
                *o = a + b;
            }
        }
        gs.add("cls_head.weight", &gw_cls);
        gs.add("cls_head.bias", &gb_cls);
        gs.add("reg_head.weight", &gw_reg);
        gs.add("reg_head.bias", &gb_reg);

        let mut fc_gw = vec![0.0; self.attention.fc.weight.len()];
        let mut fc_gb = vec![0.0; self.attention.fc.bias.len()];
        let mut fused_bev_cot =
            BEVFeatureMap::zeros(trace.fused_bev.nx, trace.fused_bev.ny, trace.fused_bev.c);
        let att_cots = fuse_backward(
            &trace.attn.output,
            &trace.queries,
            &self.attention,
            &fq_cots,
            &mut fc_gw,
            &mut fc_gb,
            &mut fused_bev_cot,
        );
        gs.add("attn.fc.weight", &fc_gw);
        gs.add("attn.fc.bias", &fc_gb);

        let ag = cross_attention_backward(
            &trace.embedded,
            &trace.camera_bev,
            &self.attention,
            &trace.attn,
            training,
            &att_cots,
        );
        gs.add("attn.w_q.weight", &ag.w_q_weight);
        gs.add("attn.w_q.bias", &ag.w_q_bias);
        gs.add("attn.w_k.weight", &ag.w_k_weight);
        gs.add("attn.w_k.bias", &ag.w_k_bias);
        gs.add("attn.w_v.weight", &ag.w_v_weight);
        gs.add("attn.w_v.bias", &ag.w_v_bias);
        // query embeddings read the fused map at their cells; the one-hot
        // block carries no parameters
        let c_bev = trace.fused_bev.c;
        for (q, ecot) in trace.queries.iter().zip(&ag.embedded) {
            for (o, &g) in fused_bev_cot.cell_mut(q.i, q.j).iter_mut().zip(&ecot[..c_bev]) {
                *o += g;
            }
        }

        let hg = heatmap_head_backward(
            &trace.fused_bev,
            &self.heatmap_head,
            &trace.head,
            &lg.heatmap_probs,
        );
        gs.add("head.conv1.kernel", &hg.conv1_kernel);
        gs.add("head.conv1.bias", &hg.conv1_bias);
        gs.add("head.conv2.kernel", &hg.conv2_kernel);
        gs.add("head.conv2.bias", &hg.conv2_bias);
        for (o, &g) in fused_bev_cot.data.iter_mut().zip(&hg.bev.data) {
            *o += g;
        }

        let camera_in_cot = match (&self.stream_b, &trace.stream_b) {
            (Some(sb), Some(tb)) => {
                let c_stream = cfg.stream_bev_channels();
                let (a_cot, mut b_cot) = channel_concat_backward(&fused_bev_cot, c_stream);
                for (o, &g) in b_cot.data.iter_mut().zip(&ag.camera_bev.data) {
                    *o += g;
                }
                stream_backward(&self.stream_a, "sparse.lidar", &trace.stream_a, &a_cot, &mut gs)?;
                let in_cot = stream_backward(sb, "sparse.camera", tb, &b_cot, &mut gs)?;
                in_cot
            }
            _ => {
                for (o, &g) in fused_bev_cot.data.iter_mut().zip(&ag.camera_bev.data) {
                    *o += g;
                }
                let joint_cot = stream_backward(
                    &self.stream_a,
                    "sparse.shared",
                    &trace.stream_a,
                    &fused_bev_cot,
                    &mut gs,
                )?;
                // drop the 4 lidar channels, keep the camera block
                let mut cam = SparseTensor3D {
                    coords: joint_cot.coords.clone(),
                    features: vec![0.0; joint_cot.len() * cfg.c_img],
                    dims: joint_cot.dims,
                    channels: cfg.c_img,
                };
                for i in 0..joint_cot.len() {
                    cam.row_mut(i).copy_from_slice(&joint_cot.row(i)[4..]);
                }
                cam
            }
        };

        if cfg.ablation.decoration && cfg.ablation.e2e {
            let mut point_cots = vec![vec![0.0; cfg.c_img]; trace.n_points];
            voxel_feature_backward(&trace.groups, &camera_in_cot, &mut point_cots);
            let mut fmap_cot = FeatureMap2D::zeros(trace.fmap.h, trace.fmap.w, trace.fmap.c);
            decorate_backward(&trace.sites, &point_cots, &mut fmap_cot);
            if let Some(bt) = &trace.backbone {
                let bg = backbone_backward(&trace.image, &self.backbone2d, bt, &fmap_cot)?;
                gs.add("backbone2d.conv1.kernel", &bg.conv1.kernel);
                gs.add("backbone2d.conv1.bias", &bg.conv1.bias);
                gs.add("backbone2d.conv2.kernel", &bg.conv2.kernel);
                gs.add("backbone2d.conv2.bias", &bg.conv2.bias);
                gs.add("backbone2d.conv3.kernel", &bg.conv3.kernel);
                gs.add("backbone2d.conv3.bias", &bg.conv3.bias);
            }
        }
        Ok(gs)
    }

    /// Decode scored detections from a forward trace.
    pub fn detections(&self, cfg: &Config, trace: &ForwardTrace) -> Vec<Detection> {
        let cell = cfg.bev_cell_size();
        let origin = cfg.bev_origin();
        let mut out = Vec::new();
        for (qi, q) in trace.queries.iter().enumerate() {
            let score = sigmoid(trace.cls_logits[qi][q.class_id]);
            if score < cfg.score_threshold {
                continue;
            }
            out.push(Detection {
                class_id: q.class_id,
                score,
                bbox: decode_box(q, &trace.reg[qi], cell, origin),
            });
        }
        if cfg.nms_iou < 1.0 {
            out = crate::detect_loss::bev_nms(&out, cfg.nms_iou);
        }
        out
    }
}

/// Loss cotangents at the three head outputs.
pub struct LossGrads {
    /// Gradient of the total loss with respect to heatmap probabilities.
    pub heatmap_probs: Vec<f64>,
    /// Per query, gradient with respect to the classification logits.
    pub cls_logits: Vec<Vec<f64>>,
    /// Per query, gradient with respect to the regression outputs (already
    /// scaled by the regression weight; zero rows for background queries).
    pub reg: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CalibRig;
    use nalgebra::{Matrix3x4, Matrix4};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn desk_rig() -> CalibRig {
        let p = Matrix3x4::new(
            24.0, 0.0, 48.0, 0.0, //
            0.0, 24.0, 32.0, 0.0, //
            0.0, 0.0, 1.0, 0.0,
        );
        let r = Matrix4::identity();
        let t = Matrix4::new(
            0.0, -1.0, 0.0, 0.0, //
            0.0, 0.0, -1.0, 0.0, //
            1.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        );
        CalibRig::from_parts(p, r, t)
    }

    fn tiny_cfg() -> Config {
        Config {
            c_img: 4,
            d_model: 8,
            fc_out: 12,
            head_hidden: 8,
            sparse_channels: [4, 6, 6, 8],
            n_queries: 2,
            scene_clutter: 30,
            ..Config::default()
        }
    }

    fn random_points(n: usize, seed: u64) -> Vec<LidarPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                LidarPoint::new(
                    rng.random_range(4.0..30.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-1.9..1.5),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect()
    }

    fn random_image(cfg: &Config, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::zeros(cfg.image_h, cfg.image_w, 3);
        for v in img.data.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        img
    }

    fn fake_gt() -> Vec<(Box3D, usize)> {
        vec![
            (Box3D::new(10.0, -4.0, -1.25, 3.0, 2.0, 1.5, 0.4), 0),
            (Box3D::new(22.0, 6.0, -1.25, 3.0, 2.0, 1.5, -1.1), 1),
        ]
    }

    #[test]
    fn forward_shapes_consistent() {
        let cfg = tiny_cfg();
        let model = Model::seeded(&cfg, 7);
        let tr = model
            .forward(&cfg, &random_points(150, 1), &random_image(&cfg, 2), &desk_rig(), false, 0)
            .unwrap();
        assert_eq!(tr.fused_bev.nx, 16);
        assert_eq!(tr.fused_bev.ny, 16);
        assert_eq!(tr.fused_bev.c, cfg.fused_bev_channels());
        assert_eq!(tr.head.heatmap.k, cfg.k_classes);
        assert!(tr.queries.len() <= cfg.n_queries * cfg.k_classes);
        for (fq, q) in tr.fused_q.iter().zip(&tr.queries) {
            assert_eq!(fq.len(), cfg.fc_out + cfg.fused_bev_channels());
            assert!(q.i < 16 && q.j < 16);
        }
        for row in &tr.cls_logits {
            assert_eq!(row.len(), cfg.k_classes);
        }
        for row in &tr.reg {
            assert_eq!(row.len(), REG_DIM);
        }
    }

    #[test]
    fn single_stream_mode_runs() {
        let mut cfg = tiny_cfg();
        cfg.ablation.two_sparse_conv = false;
        let model = Model::seeded(&cfg, 7);
        assert!(model.stream_b.is_none());
        let tr = model
            .forward(&cfg, &random_points(100, 3), &random_image(&cfg, 4), &desk_rig(), false, 0)
            .unwrap();
        assert_eq!(tr.fused_bev.c, cfg.stream_bev_channels());
        let (report, lg) = model.loss(&cfg, &tr, &fake_gt()).unwrap();
        assert!(report.total.is_finite());
        model.backward(&cfg, &tr, &lg, false).unwrap();
    }

    #[test]
    fn loss_decomposition_matches() {
        let cfg = tiny_cfg();
        let model = Model::seeded(&cfg, 9);
        let tr = model
            .forward(&cfg, &random_points(150, 5), &random_image(&cfg, 6), &desk_rig(), false, 0)
            .unwrap();
        let (report, _) = model.loss(&cfg, &tr, &fake_gt()).unwrap();
        assert_eq!(report.l_cls, report.l_heatmap + report.l_query_cls);
        assert_eq!(report.total, report.l_cls + 2.0 * report.l_reg);
    }

    fn total_loss_of(
        model: &Model,
        cfg: &Config,
        pts: &[LidarPoint],
        img: &Image,
        gt: &[(Box3D, usize)],
    ) -> (f64, Vec<usize>) {
        let tr = model.forward(cfg, pts, img, &desk_rig(), true, 0xABCD).unwrap();
        (model.loss(cfg, &tr, gt).unwrap().0.total, probe_signature(&tr))
    }

    /// Discrete state of one forward pass: selected queries plus the sign
    /// pattern of every ReLU input. Finite differences are only valid when
    /// a perturbation leaves all of this unchanged.
    fn probe_signature(tr: &ForwardTrace) -> Vec<usize> {
        let mut sig: Vec<usize> = tr
            .queries
            .iter()
            .flat_map(|q| [q.i, q.j, q.class_id])
            .collect();
        let mut push_grid = |data: &[f64]| {
            sig.push(data.iter().filter(|&&x| x > 0.0).count());
        };
        if let Some(b) = &tr.backbone {
            push_grid(&b.a1.data);
            push_grid(&b.a2.data);
        }
        for st in std::iter::once(&tr.stream_a).chain(tr.stream_b.iter()) {
            push_grid(&st.s1.features);
            push_grid(&st.s2.features);
            push_grid(&st.s3.features);
            push_grid(&st.s4.features);
        }
        sig
    }

    /// Central finite differences on a handful of parameters from every
    /// block, through the entire pipeline and loss.
    #[test]
    fn end_to_end_gradcheck_spot() {
        let cfg = tiny_cfg();
        let model = Model::seeded(&cfg, 11);
        let pts = random_points(80, 7);
        let img = random_image(&cfg, 8);
        let gt = fake_gt();
        let tr = model.forward(&cfg, &pts, &img, &desk_rig(), true, 0xABCD).unwrap();
        let (_, lg) = model.loss(&cfg, &tr, &gt).unwrap();
        let gs = model.backward(&cfg, &tr, &lg, true).unwrap();

        let mut names = Vec::new();
        model.visit_params(&mut |n, _| names.push(n.to_string()));
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0usize;
        for name in &names {
            let Some(g) = gs.get(name) else { continue };
            let len = g.len();
            let idx = rng.random_range(0..len);
            let analytic = g[idx];
            let probe = |delta: f64| {
                let mut m = model.clone();
                m.visit_params_mut(&mut |n, p| {
                    if n == name {
                        p[idx] += delta;
                    }
                });
                total_loss_of(&m, &cfg, &pts, &img, &gt)
            };
            let (lo_plus, sig_plus) = probe(h);
            let (lo_minus, sig_minus) = probe(-h);
            let base_sig = probe_signature(&tr);
            if sig_plus != base_sig || sig_minus != base_sig {
                // the probe flipped query selection or a ReLU sign; the
                // difference quotient straddles a kink there
                continue;
            }
            let numeric = (lo_plus - lo_minus) / (2.0 * h);
            if analytic.abs().max(numeric.abs()) < 1e-7 {
                // below central-difference resolution at this loss scale
                checked += 1;
                continue;
            }
            let denom = analytic.abs().max(numeric.abs());
            assert!(
                (analytic - numeric).abs() / denom < 1e-4
                    || (analytic - numeric).abs() < 5e-9,
                "{name}[{idx}]: analytic {analytic} vs numeric {numeric}"
            );
            checked += 1;
        }
        assert!(checked >= 20, "only {checked} parameter blocks had gradients");
    }

    #[test]
    fn decoration_off_skips_backbone() {
        let mut cfg = tiny_cfg();
        cfg.ablation.decoration = false;
        let model = Model::seeded(&cfg, 13);
        let tr = model
            .forward(&cfg, &random_points(100, 9), &random_image(&cfg, 10), &desk_rig(), true, 1)
            .unwrap();
        assert!(tr.backbone.is_none());
        assert!(tr.fmap.data.iter().all(|&v| v == 0.0));
        let (_, lg) = model.loss(&cfg, &tr, &fake_gt()).unwrap();
        let gs = model.backward(&cfg, &tr, &lg, true).unwrap();
        assert!(gs.get("backbone2d.conv1.kernel").is_none());
    }

    #[test]
    fn e2e_off_gives_no_backbone_grads() {
        let mut cfg = tiny_cfg();
        cfg.ablation.e2e = false;
        let model = Model::seeded(&cfg, 13);
        let tr = model
            .forward(&cfg, &random_points(100, 9), &random_image(&cfg, 10), &desk_rig(), true, 1)
            .unwrap();
        assert!(tr.backbone.is_some());
        let (_, lg) = model.loss(&cfg, &tr, &fake_gt()).unwrap();
        let gs = model.backward(&cfg, &tr, &lg, true).unwrap();
        assert!(gs.get("backbone2d.conv1.kernel").is_none());
        assert!(gs.get("sparse.camera.l1.kernel").is_some());
    }

    #[test]
    fn visitor_names_match_between_ref_and_mut() {
        let cfg = tiny_cfg();
        let mut model = Model::seeded(&cfg, 17);
        let mut ref_names = Vec::new();
        model.visit_params(&mut |n, p| ref_names.push((n.to_string(), p.len())));
        let mut mut_names = Vec::new();
        model.visit_params_mut(&mut |n, p| mut_names.push((n.to_string(), p.len())));
        mut_names.sort();
        let mut sorted_ref = ref_names.clone();
        sorted_ref.sort();
        assert_eq!(sorted_ref, mut_names);
        assert_eq!(ref_names.len(), 38);
    }

    #[test]
    fn detections_respect_threshold_and_budget() {
        let cfg = tiny_cfg();
        let model = Model::seeded(&cfg, 19);
        let tr = model
            .forward(&cfg, &random_points(120, 11), &random_image(&cfg, 12), &desk_rig(), false, 0)
            .unwrap();
        let dets = model.detections(&cfg, &tr);
        assert!(dets.len() <= cfg.n_queries * cfg.k_classes);
        for d in &dets {
            assert!(d.score >= cfg.score_threshold);
            assert!(d.class_id < cfg.k_classes);
        }
    }
}
