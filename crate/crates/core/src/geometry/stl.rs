//! Binary and ASCII STL reading and writing.

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub normal: Vec3,
    pub vertices: [Vec3; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub triangles: Vec<Triangle>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl TriangleMesh {
    pub fn new(triangles: Vec<Triangle>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::Parameter("mesh has no triangles".into()));
        }
        if triangles
            .iter()
            .flat_map(|t| t.vertices.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Parameter("mesh has non-finite vertex coordinates".into()));
        }
        Ok(TriangleMesh { triangles })
    }

    pub fn bounding_box(&self) -> BoundingBox {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for v in self.triangles.iter().flat_map(|t| t.vertices.iter()) {
            for a in 0..3 {
                min[a] = min[a].min(v[a]);
                max[a] = max[a].max(v[a]);
            }
        }
        BoundingBox { min, max }
    }

    pub fn translated(&self, d: Vec3) -> TriangleMesh {
        let triangles = self
            .triangles
            .iter()
            .map(|t| Triangle {
                normal: t.normal,
                vertices: t.vertices.map(|v| [v[0] + d[0], v[1] + d[1], v[2] + d[2]]),
            })
            .collect();
        TriangleMesh { triangles }
    }

    /// Every undirected edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        use std::collections::HashMap;
        let key = |v: &Vec3| v.map(f64::to_bits);
        let mut edges: HashMap<([u64; 3], [u64; 3]), u32> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (key(&t.vertices[e]), key(&t.vertices[(e + 1) % 3]));
                let k = if a <= b { (a, b) } else { (b, a) };
                *edges.entry(k).or_default() += 1;
            }
        }
        edges.values().all(|&n| n == 2)
    }

    /// Axis-aligned box with outward-facing triangles.
    pub fn cuboid(min: Vec3, max: Vec3) -> TriangleMesh {
        let c = |i: usize| {
            [
                if i & 1 == 0 { min[0] } else { max[0] },
                if i & 2 == 0 { min[1] } else { max[1] },
                if i & 4 == 0 { min[2] } else { max[2] },
            ]
        };
        // Quads listed counter-clockwise seen from outside.
        let quads: [([usize; 4], Vec3); 6] = [
            ([0, 2, 3, 1], [0.0, 0.0, -1.0]),
            ([4, 5, 7, 6], [0.0, 0.0, 1.0]),
            ([0, 1, 5, 4], [0.0, -1.0, 0.0]),
            ([2, 6, 7, 3], [0.0, 1.0, 0.0]),
            ([0, 4, 6, 2], [-1.0, 0.0, 0.0]),
            ([1, 3, 7, 5], [1.0, 0.0, 0.0]),
        ];
        let mut triangles = Vec::with_capacity(12);
        for (q, n) in quads {
            triangles.push(Triangle {
                normal: n,
                vertices: [c(q[0]), c(q[1]), c(q[2])],
            });
            triangles.push(Triangle {
                normal: n,
                vertices: [c(q[0]), c(q[2]), c(q[3])],
            });
        }
        TriangleMesh { triangles }
    }

    /// Latitude/longitude sphere tessellation.
    pub fn uv_sphere(center: Vec3, radius: f64, slices: usize, stacks: usize) -> TriangleMesh {
        use std::f64::consts::PI;
        let point = |i: usize, j: usize| -> Vec3 {
            if j == 0 {
                return [center[0], center[1], center[2] - radius];
            }
            if j == stacks {
                return [center[0], center[1], center[2] + radius];
            }
            let theta = PI * j as f64 / stacks as f64;
            let phi = 2.0 * PI * (i % slices) as f64 / slices as f64;
            [
                center[0] + radius * theta.sin() * phi.cos(),
                center[1] + radius * theta.sin() * phi.sin(),
                center[2] - radius * theta.cos(),
            ]
        };
        let mut triangles = Vec::new();
        for j in 0..stacks {
            for i in 0..slices {
                let (a, b, c, d) = (point(i, j), point(i + 1, j), point(i + 1, j + 1), point(i, j + 1));
                if j != 0 {
                    triangles.push(Triangle {
                        normal: face_normal(&[a, b, c]),
                        vertices: [a, b, c],
                    });
                }
                if j != stacks - 1 {
                    triangles.push(Triangle {
                        normal: face_normal(&[a, c, d]),
                        vertices: [a, c, d],
                    });
                }
            }
        }
        TriangleMesh { triangles }
    }
}

pub fn face_normal(v: &[Vec3; 3]) -> Vec3 {
    let u = [v[1][0] - v[0][0], v[1][1] - v[0][1], v[1][2] - v[0][2]];
    let w = [v[2][0] - v[0][0], v[2][1] - v[0][1], v[2][2] - v[0][2]];
    let n = [
        u[1] * w[2] - u[2] * w[1],
        u[2] * w[0] - u[0] * w[2],
        u[0] * w[1] - u[1] * w[0],
    ];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len > 0.0 {
        n.map(|c| c / len)
    } else {
        [0.0; 3]
    }
}

const HEADER_LEN: usize = 80;
const RECORD_LEN: usize = 50;

fn looks_ascii(bytes: &[u8]) -> bool {
    let trimmed = bytes
        .iter()
        .position(|b| !b.is_ascii_whitespace())
        .map(|i| &bytes[i..])
        .unwrap_or(&[]);
    if !trimmed.starts_with(b"solid") {
        return false;
    }
    // Some binary exporters also begin their header with "solid"; trust the
    // declared record count when it matches the file size exactly.
    if bytes.len() >= HEADER_LEN + 4 {
        let n = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
        if HEADER_LEN + 4 + n * RECORD_LEN == bytes.len() {
            return false;
        }
    }
    true
}

pub fn parse_stl(bytes: &[u8]) -> Result<TriangleMesh> {
    if looks_ascii(bytes) {
        parse_ascii(bytes)
    } else {
        parse_binary(bytes)
    }
}

pub fn read_stl(path: &std::path::Path) -> Result<TriangleMesh> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_stl(&bytes)
}

fn read_vec3(b: &[u8]) -> Vec3 {
    let f = |i: usize| f32::from_le_bytes(b[4 * i..4 * i + 4].try_into().unwrap()) as f64;
    [f(0), f(1), f(2)]
}

fn parse_binary(bytes: &[u8]) -> Result<TriangleMesh> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::StlTruncated {
            record: 0,
            offset: bytes.len(),
        });
    }
    let n = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
    let mut triangles = Vec::with_capacity(n.min((bytes.len() - 84) / RECORD_LEN));
    for record in 0..n {
        let offset = HEADER_LEN + 4 + record * RECORD_LEN;
        let Some(r) = bytes.get(offset..offset + RECORD_LEN) else {
            return Err(Error::StlTruncated { record, offset });
        };
        triangles.push(Triangle {
            normal: read_vec3(&r[0..12]),
            vertices: [read_vec3(&r[12..24]), read_vec3(&r[24..36]), read_vec3(&r[36..48])],
        });
    }
    TriangleMesh::new(triangles)
}

fn parse_ascii(bytes: &[u8]) -> Result<TriangleMesh> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::StlParse {
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        message: "invalid UTF-8".into(),
    })?;
    let mut tokens = text
        .lines()
        .enumerate()
        .flat_map(|(i, l)| l.split_whitespace().map(move |t| (i + 1, t)))
        .peekable();
    let mut last_line = 1;
    let mut next = |what: &str| -> Result<(usize, &str)> {
        match tokens.next() {
            Some((l, t)) => {
                last_line = l;
                Ok((l, t))
            }
            None => Err(Error::StlParse {
                line: last_line,
                message: format!("unexpected end of file, expected {what}"),
            }),
        }
    };
    fn expect(got: (usize, &str), want: &str) -> Result<()> {
        if got.1 != want {
            return Err(Error::StlParse {
                line: got.0,
                message: format!("expected '{want}', found '{}'", got.1),
            });
        }
        Ok(())
    }
    fn number(got: (usize, &str)) -> Result<f64> {
        got.1.parse::<f64>().map_err(|_| Error::StlParse {
            line: got.0,
            message: format!("invalid number '{}'", got.1),
        })
    }

    expect(next("solid")?, "solid")?;
    let mut triangles = Vec::new();
    // The solid name is optional and may span several tokens.
    let mut tok = next("facet")?;
    while tok.1 != "facet" && tok.1 != "endsolid" {
        tok = next("facet")?;
    }
    while tok.1 == "facet" {
        expect(next("normal")?, "normal")?;
        let normal = [number(next("number")?)?, number(next("number")?)?, number(next("number")?)?];
        expect(next("outer")?, "outer")?;
        expect(next("loop")?, "loop")?;
        let mut vertices = [[0.0; 3]; 3];
        for v in vertices.iter_mut() {
            expect(next("vertex")?, "vertex")?;
            *v = [number(next("number")?)?, number(next("number")?)?, number(next("number")?)?];
        }
        expect(next("endloop")?, "endloop")?;
        expect(next("endfacet")?, "endfacet")?;
        triangles.push(Triangle { normal, vertices });
        tok = next("facet or endsolid")?;
    }
    expect(tok, "endsolid")?;
    TriangleMesh::new(triangles)
}

pub fn write_binary_stl(mesh: &TriangleMesh, header: &str) -> Vec<u8> {
    let mut out = vec![0u8; HEADER_LEN];
    let h = header.as_bytes();
    out[..h.len().min(HEADER_LEN)].copy_from_slice(&h[..h.len().min(HEADER_LEN)]);
    out.extend_from_slice(&(mesh.triangles.len() as u32).to_le_bytes());
    for t in &mesh.triangles {
        for v in std::iter::once(&t.normal).chain(t.vertices.iter()) {
            for c in v {
                out.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out
}

pub fn write_ascii_stl(mesh: &TriangleMesh, name: &str) -> String {
    let mut s = format!("solid {name}\n");
    for t in &mesh.triangles {
        let n = t.normal;
        s.push_str(&format!("  facet normal {} {} {}\n    outer loop\n", n[0], n[1], n[2]));
        for v in &t.vertices {
            s.push_str(&format!("      vertex {} {} {}\n", v[0], v[1], v[2]));
        }
        s.push_str("    endloop\n  endfacet\n");
    }
    s.push_str(&format!("endsolid {name}\n"));
    s
}
