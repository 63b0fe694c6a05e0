use serde::{Deserialize, Serialize};

use super::scene::{Color, Object, Scene, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WordOrder {
    ColorShape,
    ShapeColor,
}

impl WordOrder {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "color-shape" => Some(WordOrder::ColorShape),
            "shape-color" => Some(WordOrder::ShapeColor),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WordOrder::ColorShape => "color-shape",
            WordOrder::ShapeColor => "shape-color",
        }
    }
}

/// A toy caption grammar: a determiner followed by one (color, shape) word
/// pair per object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub tag: String,
    pub determiner: String,
    /// Indexed like [`Color::ALL`].
    pub colors: [String; 5],
    /// Indexed like [`Shape::ALL`].
    pub shapes: [String; 4],
    pub order: WordOrder,
}

fn words<const N: usize>(w: [&str; N]) -> [String; N] {
    w.map(str::to_string)
}

impl LanguageSpec {
    pub fn english() -> Self {
        LanguageSpec {
            tag: "en".into(),
            determiner: "the".into(),
            colors: words(["red", "green", "blue", "yellow", "purple"]),
            shapes: words(["circle", "square", "triangle", "bar"]),
            order: WordOrder::ColorShape,
        }
    }

    pub fn german() -> Self {
        LanguageSpec {
            tag: "de".into(),
            determiner: "die".into(),
            colors: words(["rot", "gruen", "blau", "gelb", "lila"]),
            shapes: words(["kreis", "quadrat", "dreieck", "balken"]),
            order: WordOrder::ColorShape,
        }
    }

    pub fn french() -> Self {
        LanguageSpec {
            tag: "fr".into(),
            determiner: "les".into(),
            colors: words(["rouge", "vert", "bleu", "jaune", "violet"]),
            shapes: words(["rond", "carre", "trigone", "barre"]),
            order: WordOrder::ShapeColor,
        }
    }

    pub fn czech() -> Self {
        LanguageSpec {
            tag: "cs".into(),
            determiner: "ty".into(),
            colors: words(["cerveny", "zeleny", "modry", "zluty", "fialovy"]),
            shapes: words(["kruh", "ctverec", "trojuhelnik", "pruh"]),
            order: WordOrder::ColorShape,
        }
    }

    pub fn color_word(&self, c: Color) -> &str {
        &self.colors[Color::ALL.iter().position(|&x| x == c).unwrap()]
    }

    pub fn shape_word(&self, s: Shape) -> &str {
        &self.shapes[Shape::ALL.iter().position(|&x| x == s).unwrap()]
    }

    /// Every surface word of the language.
    pub fn lexicon(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.determiner.as_str())
            .chain(self.colors.iter().map(String::as_str))
            .chain(self.shapes.iter().map(String::as_str))
    }

    pub fn caption(&self, scene: &Scene) -> Vec<String> {
        let mut out = vec![self.determiner.clone()];
        for o in scene.objects() {
            let (c, s) = (self.color_word(o.color), self.shape_word(o.shape));
            match self.order {
                WordOrder::ColorShape => out.extend([c.to_string(), s.to_string()]),
                WordOrder::ShapeColor => out.extend([s.to_string(), c.to_string()]),
            }
        }
        out
    }

    pub fn caption_text(&self, scene: &Scene) -> String {
        self.caption(scene).join(" ")
    }

    /// Recovers the (color, shape) sequence of a well-formed caption.
    pub fn parse(&self, text: &str) -> Option<Vec<(Color, Shape)>> {
        let w: Vec<&str> = text.split_whitespace().collect();
        if w.first() != Some(&self.determiner.as_str()) || w.len() % 2 != 1 {
            return None;
        }
        let color = |s: &str| Color::ALL.iter().copied().find(|&c| self.color_word(c) == s);
        let shape = |s: &str| Shape::ALL.iter().copied().find(|&x| self.shape_word(x) == s);
        w[1..]
            .chunks(2)
            .map(|p| match self.order {
                WordOrder::ColorShape => Some((color(p[0])?, shape(p[1])?)),
                WordOrder::ShapeColor => Some((color(p[1])?, shape(p[0])?)),
            })
            .collect()
    }

    /// Renders a parsed (color, shape) sequence in this language.
    pub fn realize(&self, concepts: &[(Color, Shape)]) -> String {
        let objects = concepts
            .iter()
            .enumerate()
            .map(|(cell, &(color, shape))| Object { shape, color, cell })
            .collect();
        match Scene::new(objects) {
            Some(s) => self.caption_text(&s),
            None => self.determiner.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_red_circle() {
        let s = Scene::new(vec![Object {
            shape: Shape::Circle,
            color: Color::Red,
            cell: 0,
        }])
        .unwrap();
        assert_eq!(LanguageSpec::english().caption(&s), ["the", "red", "circle"]);
        assert_eq!(LanguageSpec::french().caption_text(&s), "les rond rouge");
    }

    #[test]
    fn parse_inverts_caption() {
        for seed in 0..50 {
            let s = Scene::from_seed(seed);
            for l in [LanguageSpec::french(), LanguageSpec::german()] {
                let parsed = l.parse(&l.caption_text(&s)).unwrap();
                assert_eq!(
                    LanguageSpec::english().realize(&parsed),
                    LanguageSpec::english().caption_text(&s)
                );
            }
        }
    }
}
