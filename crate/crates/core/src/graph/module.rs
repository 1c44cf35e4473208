use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cost::ModuleCount;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvForm {
    Dense,
    Depthwise,
    Pointwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModuleKind {
    Zero,
    Identity,
    Relu,
    BatchNorm,
    AvgPool { k: usize },
    MaxPool { k: usize },
    Conv { kernel_size: usize, dilation: usize, form: ConvForm },
}

/// One atomic compute unit of a candidate chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasicModule {
    #[serde(flatten)]
    pub kind: ModuleKind,
    pub stride: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl BasicModule {
    pub fn new(kind: ModuleKind, in_ch: usize, out_ch: usize) -> Self {
        Self {
            kind,
            stride: 1,
            in_ch,
            out_ch,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, ModuleKind::Conv { .. })
    }

    /// Whether the module can carry a spatial stride.
    pub fn is_spatial(&self) -> bool {
        matches!(
            self.kind,
            ModuleKind::Identity | ModuleKind::AvgPool { .. } | ModuleKind::MaxPool { .. } | ModuleKind::Conv { .. }
        )
    }

    /// Kernel tensor shape for conv modules.
    pub fn kernel_shape(&self) -> Option<[usize; 4]> {
        match self.kind {
            ModuleKind::Conv { kernel_size: k, form, .. } => Some(match form {
                ConvForm::Dense => [self.out_ch, self.in_ch, k, k],
                ConvForm::Depthwise => [self.out_ch, 1, k, k],
                ConvForm::Pointwise => [self.out_ch, self.in_ch, 1, 1],
            }),
            _ => None,
        }
    }

    /// Spatial footprint `d(k-1)+1` of a conv module.
    pub fn effective_size(&self) -> Option<usize> {
        match self.kind {
            ModuleKind::Conv { kernel_size, dilation, .. } => Some(dilation * (kernel_size - 1) + 1),
            _ => None,
        }
    }
}

impl fmt::Display for BasicModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ModuleKind::Zero => write!(f, "zero")?,
            ModuleKind::Identity => write!(f, "identity")?,
            ModuleKind::Relu => write!(f, "relu")?,
            ModuleKind::BatchNorm => write!(f, "bn")?,
            ModuleKind::AvgPool { k } => write!(f, "avgpool(k={k})")?,
            ModuleKind::MaxPool { k } => write!(f, "maxpool(k={k})")?,
            ModuleKind::Conv { kernel_size, dilation, form } => {
                let name = match form {
                    ConvForm::Dense => "conv",
                    ConvForm::Depthwise => "dwconv",
                    ConvForm::Pointwise => "pwconv",
                };
                write!(f, "{name}(k={kernel_size}")?;
                if dilation != 1 {
                    write!(f, ",d={dilation}")?;
                }
                write!(f, ")")?;
            }
        }
        if self.stride != 1 {
            write!(f, "/s{}", self.stride)?;
        }
        Ok(())
    }
}

/// Matching granularity for sharing and counting: a single module, or a
/// depthwise convolution immediately followed by a pointwise one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "unit", rename_all = "snake_case")]
pub enum Unit {
    Single(BasicModule),
    Separable { depthwise: BasicModule, pointwise: BasicModule },
}

impl Unit {
    pub fn modules(&self) -> Vec<BasicModule> {
        match *self {
            Unit::Single(m) => vec![m],
            Unit::Separable { depthwise, pointwise } => vec![depthwise, pointwise],
        }
    }

    pub fn is_conv(&self) -> bool {
        match self {
            Unit::Single(m) => m.is_conv(),
            Unit::Separable { .. } => true,
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            Unit::Single(m) => m.stride,
            Unit::Separable { depthwise, .. } => depthwise.stride,
        }
    }

    pub fn in_ch(&self) -> usize {
        match self {
            Unit::Single(m) => m.in_ch,
            Unit::Separable { depthwise, .. } => depthwise.in_ch,
        }
    }

    pub fn out_ch(&self) -> usize {
        match self {
            Unit::Single(m) => m.out_ch,
            Unit::Separable { pointwise, .. } => pointwise.out_ch,
        }
    }

    /// `(kernel_size, dilation)` of the spatial part of a conv unit.
    pub fn spatial_kernel(&self) -> Option<(usize, usize)> {
        let m = match self {
            Unit::Single(m) => m,
            Unit::Separable { depthwise, .. } => depthwise,
        };
        match m.kind {
            ModuleKind::Conv { kernel_size, dilation, .. } => Some((kernel_size, dilation)),
            _ => None,
        }
    }

    pub fn effective_size(&self) -> Option<usize> {
        self.spatial_kernel().map(|(k, d)| d * (k - 1) + 1)
    }

    /// Contribution under the counting rule: Zero and Identity are free,
    /// each other module is one evaluation and a separable pair is one conv.
    pub fn count(&self) -> ModuleCount {
        match self {
            Unit::Separable { .. } => ModuleCount::new(1, 0),
            Unit::Single(m) => match m.kind {
                ModuleKind::Zero | ModuleKind::Identity => ModuleCount::new(0, 0),
                ModuleKind::Conv { .. } => ModuleCount::new(1, 0),
                _ => ModuleCount::new(0, 1),
            },
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unit::Single(m) => write!(f, "{m}"),
            Unit::Separable { depthwise, pointwise } => write!(f, "{depthwise}+{pointwise}"),
        }
    }
}

/// Series composition of modules. An empty chain is the Zero operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationChain {
    pub name: String,
    pub modules: Vec<BasicModule>,
}

impl OperationChain {
    pub fn new(name: impl Into<String>, modules: Vec<BasicModule>) -> Self {
        Self {
            name: name.into(),
            modules,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.modules.is_empty()
    }

    /// Groups modules into units, pairing each depthwise conv with a
    /// directly following pointwise conv.
    pub fn units(&self) -> Vec<Unit> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.modules.len() {
            let m = self.modules[i];
            let next = self.modules.get(i + 1);
            let pairs = matches!(m.kind, ModuleKind::Conv { form: ConvForm::Depthwise, .. })
                && matches!(next.map(|n| n.kind), Some(ModuleKind::Conv { form: ConvForm::Pointwise, .. }));
            if pairs {
                out.push(Unit::Separable {
                    depthwise: m,
                    pointwise: self.modules[i + 1],
                });
                i += 2;
            } else {
                out.push(Unit::Single(m));
                i += 1;
            }
        }
        out
    }

    /// Returns a copy whose first spatial module carries `stride`.
    pub fn with_stride(&self, stride: usize) -> Self {
        let mut c = self.clone();
        if stride != 1 {
            if let Some(m) = c.modules.iter_mut().find(|m| m.is_spatial()) {
                m.stride = stride;
            }
        }
        c
    }

    pub fn count(&self) -> ModuleCount {
        self.units().iter().map(Unit::count).sum()
    }
}

impl fmt::Display for OperationChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.modules.is_empty() {
            return write!(f, "zero");
        }
        let parts: Vec<String> = self.modules.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(k: usize, d: usize, form: ConvForm) -> BasicModule {
        BasicModule::new(ModuleKind::Conv { kernel_size: k, dilation: d, form }, 4, 4)
    }

    #[test]
    fn separable_pairs_become_one_unit() {
        let relu = BasicModule::new(ModuleKind::Relu, 4, 4);
        let bn = BasicModule::new(ModuleKind::BatchNorm, 4, 4);
        let chain = OperationChain::new(
            "sep",
            vec![relu, conv(3, 1, ConvForm::Depthwise), conv(1, 1, ConvForm::Pointwise), bn],
        );
        let units = chain.units();
        assert_eq!(units.len(), 3);
        assert!(matches!(units[1], Unit::Separable { .. }));
        assert_eq!(chain.count(), ModuleCount::new(1, 2));
    }

    #[test]
    fn stride_lands_on_first_spatial_module() {
        let relu = BasicModule::new(ModuleKind::Relu, 4, 4);
        let chain = OperationChain::new("c", vec![relu, conv(3, 1, ConvForm::Dense)]).with_stride(2);
        assert_eq!(chain.modules[0].stride, 1);
        assert_eq!(chain.modules[1].stride, 2);
    }
}
