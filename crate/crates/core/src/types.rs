use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::Error;

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self, Error> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", stringify!($name), " {:?}"),
                        other
                    ))),
                }
            }
        }
    };
}

string_enum!(
    /// Public image collection a record was ingested from.
    Source {
        CovidRepo => "covid_repo",
        ChestXray8 => "chestxray8",
        KagglePneumonia => "kaggle_pneumonia",
    }
);

string_enum!(
    /// Diagnostic class of a chest X-ray.
    Label {
        Covid19 => "covid19",
        Normal => "normal",
        Bacterial => "bacterial",
        Viral => "viral",
    }
);

string_enum!(
    /// The three binary tasks. Each pairs COVID-19 with one negative class.
    DatasetName {
        Dataset1 => "dataset1",
        Dataset2 => "dataset2",
        Dataset3 => "dataset3",
    }
);

string_enum!(
    Backbone {
        ResNet50 => "resnet50",
        ResNet101 => "resnet101",
        ResNet152 => "resnet152",
        InceptionV3 => "inceptionv3",
        InceptionResNetV2 => "inception_resnetv2",
        TinyCnn => "tiny_cnn",
    }
);

impl Label {
    /// The only source each label may come from.
    pub fn source(self) -> Source {
        match self {
            Label::Covid19 => Source::CovidRepo,
            Label::Normal => Source::ChestXray8,
            Label::Bacterial | Label::Viral => Source::KagglePneumonia,
        }
    }
}

impl Backbone {
    /// The five pretrained networks of the benchmark grid, in table order.
    pub const BENCHMARK: [Backbone; 5] = [
        Backbone::InceptionV3,
        Backbone::ResNet50,
        Backbone::ResNet101,
        Backbone::ResNet152,
        Backbone::InceptionResNetV2,
    ];

    /// Name used in rendered tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Backbone::ResNet50 => "ResNet50",
            Backbone::ResNet101 => "ResNet101",
            Backbone::ResNet152 => "ResNet152",
            Backbone::InceptionV3 => "InceptionV3",
            Backbone::InceptionResNetV2 => "Inception-ResNetV2",
            Backbone::TinyCnn => "TinyCNN",
        }
    }

    /// Square input side each network is built for.
    pub fn input_side(self) -> usize {
        match self {
            Backbone::InceptionV3 | Backbone::InceptionResNetV2 => 299,
            _ => 224,
        }
    }
}

impl DatasetName {
    pub fn negative_label(self) -> Label {
        match self {
            DatasetName::Dataset1 => Label::Normal,
            DatasetName::Dataset2 => Label::Viral,
            DatasetName::Dataset3 => Label::Bacterial,
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            DatasetName::Dataset1 => "COVID-19 / Normal",
            DatasetName::Dataset2 => "COVID-19 / Viral Pneumonia",
            DatasetName::Dataset3 => "COVID-19 / Bacterial Pneumonia",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for b in Backbone::ALL {
            assert_eq!(b.as_str().parse::<Backbone>().unwrap(), *b);
        }
        assert!("vgg16".parse::<Backbone>().is_err());
    }

    #[test]
    fn input_sides() {
        assert_eq!(Backbone::InceptionV3.input_side(), 299);
        assert_eq!(Backbone::InceptionResNetV2.input_side(), 299);
        assert_eq!(Backbone::ResNet152.input_side(), 224);
        assert_eq!(Backbone::TinyCnn.input_side(), 224);
    }
}
