use crate::conditions::EncoderConfig;
use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub views: usize,
    pub max_frames: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub sketch_cells: usize,
    pub patch: usize,
    pub mlp_hidden: usize,
    pub text_tokens: usize,
    pub bands: usize,
    /// Spatial attention spans all views of a frame when set.
    pub view_inflation: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            views: 3,
            max_frames: 4,
            channels: 4,
            d_model: 32,
            n_heads: 4,
            n_blocks: 4,
            sketch_cells: 2,
            patch: 2,
            mlp_hidden: 64,
            text_tokens: 8,
            bands: 4,
            view_inflation: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("views", self.views),
            ("max_frames", self.max_frames),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("patch", self.patch),
            ("mlp_hidden", self.mlp_hidden),
            ("text_tokens", self.text_tokens),
            ("bands", self.bands),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be positive")));
        }
        if self.sketch_cells > self.n_blocks {
            return Err(invalid(format!("{} sketch cells exceed {} blocks", self.sketch_cells, self.n_blocks)));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(invalid(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            text_tokens: self.text_tokens,
            bands: self.bands,
            views: self.views,
            hidden: self.mlp_hidden,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// `key = value` lines, one per field, in a fixed order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("views", self.views.to_string()),
            ("max_frames", self.max_frames.to_string()),
            ("channels", self.channels.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("sketch_cells", self.sketch_cells.to_string()),
            ("patch", self.patch.to_string()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("text_tokens", self.text_tokens.to_string()),
            ("bands", self.bands.to_string()),
            ("view_inflation", self.view_inflation.to_string()),
        ]
    }

    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            let num = || v.parse::<usize>().map_err(|_| invalid(format!("config {k}: bad integer {v:?}")));
            match k {
                "views" => cfg.views = num()?,
                "max_frames" => cfg.max_frames = num()?,
                "channels" => cfg.channels = num()?,
                "d_model" => cfg.d_model = num()?,
                "n_heads" => cfg.n_heads = num()?,
                "n_blocks" => cfg.n_blocks = num()?,
                "sketch_cells" => cfg.sketch_cells = num()?,
                "patch" => cfg.patch = num()?,
                "mlp_hidden" => cfg.mlp_hidden = num()?,
                "text_tokens" => cfg.text_tokens = num()?,
                "bands" => cfg.bands = num()?,
                "view_inflation" => {
                    cfg.view_inflation = v.parse().map_err(|_| invalid(format!("config {k}: bad bool {v:?}")))?
                }
                other => return Err(invalid(format!("unknown config key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
