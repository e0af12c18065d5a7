//! Which hard-example streams a run trains with.

use std::fmt;
use std::str::FromStr;

use crate::error::HexaError;

/// The standard stream is always on; the flags add adversarial views,
/// cut-mixed clean views and cut-mixed adversarial views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Scheme {
    pub adv: bool,
    pub cmx: bool,
    pub cmx_a: bool,
}

impl Scheme {
    pub const STD: Scheme = Scheme {
        adv: false,
        cmx: false,
        cmx_a: false,
    };
    pub const ADV: Scheme = Scheme {
        adv: true,
        cmx: false,
        cmx_a: false,
    };
    pub const CMX: Scheme = Scheme {
        adv: false,
        cmx: true,
        cmx_a: false,
    };
    pub const ADV_CMX: Scheme = Scheme {
        adv: true,
        cmx: true,
        cmx_a: false,
    };
    pub const ADV_CMX_A: Scheme = Scheme {
        adv: true,
        cmx: false,
        cmx_a: true,
    };
    pub const ADV_CMX_CMX_A: Scheme = Scheme {
        adv: true,
        cmx: true,
        cmx_a: true,
    };

    /// The six ablation schemes, in the order they are reported.
    pub const ABLATION: [Scheme; 6] = [
        Scheme::STD,
        Scheme::ADV,
        Scheme::CMX,
        Scheme::ADV_CMX,
        Scheme::ADV_CMX_A,
        Scheme::ADV_CMX_CMX_A,
    ];

    /// Whether any stream needs adversarial views.
    pub fn needs_adversarial(&self) -> bool {
        self.adv || self.cmx_a
    }

    pub fn needs_cutmix(&self) -> bool {
        self.cmx || self.cmx_a
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("std")?;
        if self.adv {
            f.write_str("+adv")?;
        }
        if self.cmx {
            f.write_str("+cmx")?;
        }
        if self.cmx_a {
            f.write_str("+cmx_a")?;
        }
        Ok(())
    }
}

impl FromStr for Scheme {
    type Err = HexaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut scheme = Scheme::STD;
        for part in s.split('+').map(str::trim) {
            match part.to_ascii_lowercase().as_str() {
                "std" => {}
                "adv" => scheme.adv = true,
                "cmx" => scheme.cmx = true,
                "cmx_a" | "cmxa" => scheme.cmx_a = true,
                other => {
                    return Err(HexaError::config(format!("unknown scheme component '{other}' in '{s}'")));
                }
            }
        }
        Ok(scheme)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Scheme::ABLATION {
            assert_eq!(s.to_string().parse::<Scheme>().unwrap(), s);
        }
        assert_eq!(Scheme::ADV_CMX_CMX_A.to_string(), "std+adv+cmx+cmx_a");
        assert!("std+mixup".parse::<Scheme>().is_err());
    }
}
