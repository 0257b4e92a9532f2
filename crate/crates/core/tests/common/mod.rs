#![allow(dead_code)]

/// Smooth, periodic-or-not expressions covering every grammar production.
pub const CORPUS: &[&str] = &[
    "1",
    "pi",
    "x1",
    "t",
    "-x1",
    "x1 + x2",
    "x1 - 2.5*t",
    "3*x1*x2",
    "x1/2",
    "1/(2 + sin(x1))",
    "sin(x1)",
    "cos(x2)",
    "exp(-t)",
    "exp(-t)*sin(x1)",
    "sin(x1)^2",
    "cos(x1)^3 - sin(x2)^2",
    "x1^4",
    "x1^8/40320",
    "(1 + x1^2)^(-1)",
    "(2 + cos(x1))^(-4)",
    "sin(x1)*cos(x2)*exp(-2*t)",
    "cos(x1)*(1 + 0.5*sin(t))",
    "sin(2*x1 + 3*x2 - t)",
    "exp(sin(x1))",
    "sin(cos(x1 + t))",
    "-(x1 - x2)^2",
    "--x1",
    "-x1^2",
    "2^3*x1",
    "1e-2*x1 + 2.5E1*t",
    "(x1 + t)/(3 + cos(x2))",
    "exp(-t)*sin(x1)+t*cos(2*x1)",
    "sin(x1)^2*cos(x1)^2 + 1/(1.5 + sin(x1 - x2))",
    "exp(-(x1 - pi)^2)",
    "t^2*x2 - x1*t^3",
];

pub const POINTS: &[(f64, [f64; 2])] = &[
    (0.0, [0.3, 1.1]),
    (0.25, [2.0, 4.5]),
    (0.7, [5.9, 0.05]),
    (1.3, [3.3, 2.71]),
];
