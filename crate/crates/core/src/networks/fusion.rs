use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conditioning::EmbeddingKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Unet,
    EncoderDecoder,
}

impl Architecture {
    pub const ALL: [Architecture; 2] = [Architecture::Unet, Architecture::EncoderDecoder];

    pub fn id(self) -> &'static str {
        match self {
            Architecture::Unet => "unet",
            Architecture::EncoderDecoder => "encoder_decoder",
        }
    }

    pub fn has_skips(self) -> bool {
        matches!(self, Architecture::Unet)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    None,
    ConcatRaw,
    ConcatMlp,
    Film,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Network input.
    Early,
    /// Bottleneck output.
    Middle,
    /// Input of the final classifier convolution.
    Late,
    /// Last convolution of every decoder stage.
    Decoder,
}

/// Where and how the conditioning vector enters the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FusionSpec {
    pub architecture: Architecture,
    pub mechanism: Mechanism,
    pub site: Option<Site>,
}

impl FusionSpec {
    pub fn validate(&self) -> Result<()> {
        use Mechanism::*;
        use Site::*;
        let ok = match (self.mechanism, self.site) {
            (None, Option::None) => true,
            (ConcatRaw | ConcatMlp, Some(Early | Middle | Late)) => true,
            (Film, Some(Decoder | Late)) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "mechanism {:?} cannot be placed at {:?}",
                self.mechanism, self.site
            )))
        }
    }

    pub fn embedding_kind(&self) -> Option<EmbeddingKind> {
        match self.mechanism {
            Mechanism::ConcatRaw => Some(EmbeddingKind::Identity),
            Mechanism::ConcatMlp => Some(EmbeddingKind::Mlp),
            _ => None,
        }
    }

    pub fn is_concat_at(&self, site: Site) -> bool {
        matches!(self.mechanism, Mechanism::ConcatRaw | Mechanism::ConcatMlp)
            && self.site == Some(site)
    }

    pub fn is_film_at(&self, site: Site) -> bool {
        self.mechanism == Mechanism::Film && self.site == Some(site)
    }
}

/// The nine table columns: baseline plus eight conditioned variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    ConcatRawEarly,
    ConcatRawMiddle,
    ConcatRawLate,
    ConcatMlpEarly,
    ConcatMlpMiddle,
    ConcatMlpLate,
    FilmDecoder,
    FilmLate,
}

impl Variant {
    /// Column order of the result tables.
    pub const ALL: [Variant; 9] = [
        Variant::Baseline,
        Variant::ConcatRawEarly,
        Variant::ConcatRawMiddle,
        Variant::ConcatRawLate,
        Variant::ConcatMlpEarly,
        Variant::ConcatMlpMiddle,
        Variant::ConcatMlpLate,
        Variant::FilmDecoder,
        Variant::FilmLate,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::ConcatRawEarly => "concat_raw_early",
            Variant::ConcatRawMiddle => "concat_raw_middle",
            Variant::ConcatRawLate => "concat_raw_late",
            Variant::ConcatMlpEarly => "concat_mlp_early",
            Variant::ConcatMlpMiddle => "concat_mlp_middle",
            Variant::ConcatMlpLate => "concat_mlp_late",
            Variant::FilmDecoder => "film_decoder",
            Variant::FilmLate => "film_late",
        }
    }

    /// Short column label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::ConcatRawEarly => "Raw/Early",
            Variant::ConcatRawMiddle => "Raw/Middle",
            Variant::ConcatRawLate => "Raw/Late",
            Variant::ConcatMlpEarly => "MLP/Early",
            Variant::ConcatMlpMiddle => "MLP/Middle",
            Variant::ConcatMlpLate => "MLP/Late",
            Variant::FilmDecoder => "FiLM/Decoder",
            Variant::FilmLate => "FiLM/Late",
        }
    }

    pub fn mechanism_and_site(self) -> (Mechanism, Option<Site>) {
        use Mechanism::*;
        match self {
            Variant::Baseline => (None, Option::None),
            Variant::ConcatRawEarly => (ConcatRaw, Some(Site::Early)),
            Variant::ConcatRawMiddle => (ConcatRaw, Some(Site::Middle)),
            Variant::ConcatRawLate => (ConcatRaw, Some(Site::Late)),
            Variant::ConcatMlpEarly => (ConcatMlp, Some(Site::Early)),
            Variant::ConcatMlpMiddle => (ConcatMlp, Some(Site::Middle)),
            Variant::ConcatMlpLate => (ConcatMlp, Some(Site::Late)),
            Variant::FilmDecoder => (Film, Some(Site::Decoder)),
            Variant::FilmLate => (Film, Some(Site::Late)),
        }
    }

    pub fn fusion(self, architecture: Architecture) -> FusionSpec {
        let (mechanism, site) = self.mechanism_and_site();
        FusionSpec {
            architecture,
            mechanism,
            site,
        }
    }

    pub fn column(self) -> usize {
        Variant::ALL.iter().position(|v| *v == self).expect("listed")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}
