//! Numeric semantics shared by the interpreter, the emulator and constant folding.
//!
//! Values are raw 64-bit slot contents: 32-bit integers and `f32` bits are
//! zero-extended, `f64` and `i64` use all bits. Float results are NaN
//! canonicalized so that every tier produces bit-identical values.

use core::fmt;

use crate::wasm::opcodes as op;

/// Runtime failure kinds common to both tiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrapKind {
    Unreachable,
    DivByZero,
    IntegerOverflow,
    OutOfBounds,
    StackOverflow,
    TruncError,
    /// A root scan found an untagged live slot (only possible with tagging off).
    ScanError,
}

impl TrapKind {
    pub const ALL: [TrapKind; 7] = [
        TrapKind::Unreachable,
        TrapKind::DivByZero,
        TrapKind::IntegerOverflow,
        TrapKind::OutOfBounds,
        TrapKind::StackOverflow,
        TrapKind::TruncError,
        TrapKind::ScanError,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<TrapKind> {
        TrapKind::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TrapKind::Unreachable => "Unreachable",
            TrapKind::DivByZero => "DivByZero",
            TrapKind::IntegerOverflow => "IntegerOverflow",
            TrapKind::OutOfBounds => "OutOfBounds",
            TrapKind::StackOverflow => "StackOverflow",
            TrapKind::TruncError => "TruncError",
            TrapKind::ScanError => "ScanError",
        }
    }
}

impl fmt::Display for TrapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Width {
    W32,
    W64,
}

impl Width {
    pub fn bits(self) -> u32 {
        match self {
            Width::W32 => 32,
            Width::W64 => 64,
        }
    }

    /// Truncates `v` to this width, zero-extending 32-bit values.
    #[inline]
    pub fn norm(self, v: u64) -> u64 {
        match self {
            Width::W32 => v as u32 as u64,
            Width::W64 => v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IntOp {
    Add,
    Sub,
    Mul,
    DivS,
    DivU,
    RemS,
    RemU,
    And,
    Or,
    Xor,
    Shl,
    ShrS,
    ShrU,
}

impl IntOp {
    pub fn can_trap(self) -> bool {
        matches!(self, IntOp::DivS | IntOp::DivU | IntOp::RemS | IntOp::RemU)
    }

    pub fn is_commutative(self) -> bool {
        matches!(self, IntOp::Add | IntOp::Mul | IntOp::And | IntOp::Or | IntOp::Xor)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            IntOp::Add => "add",
            IntOp::Sub => "sub",
            IntOp::Mul => "mul",
            IntOp::DivS => "div_s",
            IntOp::DivU => "div_u",
            IntOp::RemS => "rem_s",
            IntOp::RemU => "rem_u",
            IntOp::And => "and",
            IntOp::Or => "or",
            IntOp::Xor => "xor",
            IntOp::Shl => "shl",
            IntOp::ShrS => "shr_s",
            IntOp::ShrU => "shr_u",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FloatOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl FloatOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            FloatOp::Add => "fadd",
            FloatOp::Sub => "fsub",
            FloatOp::Mul => "fmul",
            FloatOp::Div => "fdiv",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FUnOp {
    Neg,
    Abs,
    Sqrt,
}

impl FUnOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            FUnOp::Neg => "fneg",
            FUnOp::Abs => "fabs",
            FUnOp::Sqrt => "fsqrt",
        }
    }
}

/// Comparison conditions. Float conditions have explicit negations because
/// `!(a < b)` differs from `a >= b` when either operand is NaN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Ne,
    LtS,
    LtU,
    GtS,
    GtU,
    LeS,
    LeU,
    GeS,
    GeU,
    FEq,
    FNe,
    FLt,
    FGt,
    FLe,
    FGe,
    FNotLt,
    FNotGt,
    FNotLe,
    FNotGe,
}

impl Cond {
    pub fn is_float(self) -> bool {
        matches!(
            self,
            Cond::FEq | Cond::FNe | Cond::FLt | Cond::FGt | Cond::FLe | Cond::FGe | Cond::FNotLt | Cond::FNotGt | Cond::FNotLe | Cond::FNotGe
        )
    }

    pub fn negate(self) -> Cond {
        use Cond::*;
        match self {
            Eq => Ne,
            Ne => Eq,
            LtS => GeS,
            GeS => LtS,
            LtU => GeU,
            GeU => LtU,
            GtS => LeS,
            LeS => GtS,
            GtU => LeU,
            LeU => GtU,
            FEq => FNe,
            FNe => FEq,
            FLt => FNotLt,
            FNotLt => FLt,
            FGt => FNotGt,
            FNotGt => FGt,
            FLe => FNotLe,
            FNotLe => FLe,
            FGe => FNotGe,
            FNotGe => FGe,
        }
    }

    /// The condition with operands swapped (`a c b` iff `b c.swap() a`).
    pub fn swap(self) -> Cond {
        use Cond::*;
        match self {
            LtS => GtS,
            GtS => LtS,
            LtU => GtU,
            GtU => LtU,
            LeS => GeS,
            GeS => LeS,
            LeU => GeU,
            GeU => LeU,
            FLt => FGt,
            FGt => FLt,
            FLe => FGe,
            FGe => FLe,
            FNotLt => FNotGt,
            FNotGt => FNotLt,
            FNotLe => FNotGe,
            FNotGe => FNotLe,
            c => c,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        use Cond::*;
        match self {
            Eq => "eq",
            Ne => "ne",
            LtS => "lt_s",
            LtU => "lt_u",
            GtS => "gt_s",
            GtU => "gt_u",
            LeS => "le_s",
            LeU => "le_u",
            GeS => "ge_s",
            GeU => "ge_u",
            FEq => "feq",
            FNe => "fne",
            FLt => "flt",
            FGt => "fgt",
            FLe => "fle",
            FGe => "fge",
            FNotLt => "fnlt",
            FNotGt => "fngt",
            FNotLe => "fnle",
            FNotGe => "fnge",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Conv {
    WrapI64,
    ExtendI32S,
    ExtendI32U,
    TruncF64S,
    ConvertI32SToF64,
}

impl Conv {
    pub fn mnemonic(self) -> &'static str {
        match self {
            Conv::WrapI64 => "wrap",
            Conv::ExtendI32S => "sext32",
            Conv::ExtendI32U => "zext32",
            Conv::TruncF64S => "trunc.f64.i32",
            Conv::ConvertI32SToF64 => "cvt.i32.f64",
        }
    }
}

/// Classification of an immediate-free numeric opcode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Numeric {
    Int(IntOp, Width),
    Float(FloatOp, Width),
    Cmp(Cond, Width),
    Eqz(Width),
    FUn(FUnOp, Width),
    Conv(Conv),
}

pub fn classify(opc: u8) -> Option<Numeric> {
    use Numeric::*;
    use Width::*;
    const INT: [IntOp; 13] = [
        IntOp::Add,
        IntOp::Sub,
        IntOp::Mul,
        IntOp::DivS,
        IntOp::DivU,
        IntOp::RemS,
        IntOp::RemU,
        IntOp::And,
        IntOp::Or,
        IntOp::Xor,
        IntOp::Shl,
        IntOp::ShrS,
        IntOp::ShrU,
    ];
    const ICMP: [Cond; 10] = [
        Cond::Eq,
        Cond::Ne,
        Cond::LtS,
        Cond::LtU,
        Cond::GtS,
        Cond::GtU,
        Cond::LeS,
        Cond::LeU,
        Cond::GeS,
        Cond::GeU,
    ];
    const FCMP: [Cond; 6] = [Cond::FEq, Cond::FNe, Cond::FLt, Cond::FGt, Cond::FLe, Cond::FGe];
    const FOPS: [FloatOp; 4] = [FloatOp::Add, FloatOp::Sub, FloatOp::Mul, FloatOp::Div];
    Some(match opc {
        op::I32_EQZ => Eqz(W32),
        op::I64_EQZ => Eqz(W64),
        op::I32_EQ..=op::I32_GE_U => Cmp(ICMP[(opc - op::I32_EQ) as usize], W32),
        op::I64_EQ..=op::I64_GE_U => Cmp(ICMP[(opc - op::I64_EQ) as usize], W64),
        op::F32_EQ..=op::F32_GE => Cmp(FCMP[(opc - op::F32_EQ) as usize], W32),
        op::F64_EQ..=op::F64_GE => Cmp(FCMP[(opc - op::F64_EQ) as usize], W64),
        op::I32_ADD..=op::I32_SHR_U => Int(INT[(opc - op::I32_ADD) as usize], W32),
        op::I64_ADD..=op::I64_SHR_U => Int(INT[(opc - op::I64_ADD) as usize], W64),
        op::F32_ADD..=op::F32_DIV => Float(FOPS[(opc - op::F32_ADD) as usize], W32),
        op::F64_ADD..=op::F64_DIV => Float(FOPS[(opc - op::F64_ADD) as usize], W64),
        op::F32_NEG => FUn(FUnOp::Neg, W32),
        op::F32_ABS => FUn(FUnOp::Abs, W32),
        op::F32_SQRT => FUn(FUnOp::Sqrt, W32),
        op::F64_NEG => FUn(FUnOp::Neg, W64),
        op::F64_ABS => FUn(FUnOp::Abs, W64),
        op::F64_SQRT => FUn(FUnOp::Sqrt, W64),
        op::I32_WRAP_I64 => Conv(self::Conv::WrapI64),
        op::I64_EXTEND_I32_S => Conv(self::Conv::ExtendI32S),
        op::I64_EXTEND_I32_U => Conv(self::Conv::ExtendI32U),
        op::I32_TRUNC_F64_S => Conv(self::Conv::TruncF64S),
        op::F64_CONVERT_I32_S => Conv(self::Conv::ConvertI32SToF64),
        _ => return None,
    })
}

pub const CANON_NAN32: u32 = 0x7fc0_0000;
pub const CANON_NAN64: u64 = 0x7ff8_0000_0000_0000;

#[inline]
pub fn f32_bits(v: f32) -> u64 {
    if v.is_nan() {
        CANON_NAN32 as u64
    } else {
        v.to_bits() as u64
    }
}

#[inline]
pub fn f64_bits(v: f64) -> u64 {
    if v.is_nan() {
        CANON_NAN64
    } else {
        v.to_bits()
    }
}

#[inline]
fn as_f32(v: u64) -> f32 {
    f32::from_bits(v as u32)
}

#[inline]
fn as_f64(v: u64) -> f64 {
    f64::from_bits(v)
}

pub fn int_op(o: IntOp, w: Width, a: u64, b: u64) -> Result<u64, TrapKind> {
    let r = match w {
        Width::W32 => {
            let (x, y) = (a as u32, b as u32);
            (match o {
                IntOp::Add => x.wrapping_add(y),
                IntOp::Sub => x.wrapping_sub(y),
                IntOp::Mul => x.wrapping_mul(y),
                IntOp::DivS => {
                    if y == 0 {
                        return Err(TrapKind::DivByZero);
                    }
                    if x as i32 == i32::MIN && y as i32 == -1 {
                        return Err(TrapKind::IntegerOverflow);
                    }
                    ((x as i32) / (y as i32)) as u32
                }
                IntOp::DivU => x.checked_div(y).ok_or(TrapKind::DivByZero)?,
                IntOp::RemS => {
                    if y == 0 {
                        return Err(TrapKind::DivByZero);
                    }
                    (x as i32).wrapping_rem(y as i32) as u32
                }
                IntOp::RemU => x.checked_rem(y).ok_or(TrapKind::DivByZero)?,
                IntOp::And => x & y,
                IntOp::Or => x | y,
                IntOp::Xor => x ^ y,
                IntOp::Shl => x.wrapping_shl(y),
                IntOp::ShrS => (x as i32).wrapping_shr(y) as u32,
                IntOp::ShrU => x.wrapping_shr(y),
            }) as u64
        }
        Width::W64 => match o {
            IntOp::Add => a.wrapping_add(b),
            IntOp::Sub => a.wrapping_sub(b),
            IntOp::Mul => a.wrapping_mul(b),
            IntOp::DivS => {
                if b == 0 {
                    return Err(TrapKind::DivByZero);
                }
                if a as i64 == i64::MIN && b as i64 == -1 {
                    return Err(TrapKind::IntegerOverflow);
                }
                ((a as i64) / (b as i64)) as u64
            }
            IntOp::DivU => a.checked_div(b).ok_or(TrapKind::DivByZero)?,
            IntOp::RemS => {
                if b == 0 {
                    return Err(TrapKind::DivByZero);
                }
                (a as i64).wrapping_rem(b as i64) as u64
            }
            IntOp::RemU => a.checked_rem(b).ok_or(TrapKind::DivByZero)?,
            IntOp::And => a & b,
            IntOp::Or => a | b,
            IntOp::Xor => a ^ b,
            IntOp::Shl => a.wrapping_shl(b as u32),
            IntOp::ShrS => (a as i64).wrapping_shr(b as u32) as u64,
            IntOp::ShrU => a.wrapping_shr(b as u32),
        },
    };
    Ok(r)
}

pub fn float_op(o: FloatOp, w: Width, a: u64, b: u64) -> u64 {
    match w {
        Width::W32 => {
            let (x, y) = (as_f32(a), as_f32(b));
            f32_bits(match o {
                FloatOp::Add => x + y,
                FloatOp::Sub => x - y,
                FloatOp::Mul => x * y,
                FloatOp::Div => x / y,
            })
        }
        Width::W64 => {
            let (x, y) = (as_f64(a), as_f64(b));
            f64_bits(match o {
                FloatOp::Add => x + y,
                FloatOp::Sub => x - y,
                FloatOp::Mul => x * y,
                FloatOp::Div => x / y,
            })
        }
    }
}

/// Negation and absolute value only touch the sign bit; square root is
/// canonicalized like other arithmetic.
pub fn float_unop(o: FUnOp, w: Width, a: u64) -> u64 {
    match (o, w) {
        (FUnOp::Neg, Width::W32) => (a as u32 ^ 0x8000_0000) as u64,
        (FUnOp::Abs, Width::W32) => (a as u32 & 0x7fff_ffff) as u64,
        (FUnOp::Sqrt, Width::W32) => f32_bits(libm::sqrtf(as_f32(a))),
        (FUnOp::Neg, Width::W64) => a ^ (1 << 63),
        (FUnOp::Abs, Width::W64) => a & !(1 << 63),
        (FUnOp::Sqrt, Width::W64) => f64_bits(libm::sqrt(as_f64(a))),
    }
}

// the negated float conditions are true on NaN, which is the point
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn cond(c: Cond, w: Width, a: u64, b: u64) -> bool {
    if c.is_float() {
        let (x, y) = match w {
            Width::W32 => (as_f32(a) as f64, as_f32(b) as f64),
            Width::W64 => (as_f64(a), as_f64(b)),
        };
        return match c {
            Cond::FEq => x == y,
            Cond::FNe => x != y,
            Cond::FLt => x < y,
            Cond::FGt => x > y,
            Cond::FLe => x <= y,
            Cond::FGe => x >= y,
            Cond::FNotLt => !(x < y),
            Cond::FNotGt => !(x > y),
            Cond::FNotLe => !(x <= y),
            Cond::FNotGe => !(x >= y),
            _ => unreachable!(),
        };
    }
    let (a, b) = (w.norm(a), w.norm(b));
    let (sa, sb) = match w {
        Width::W32 => (a as u32 as i32 as i64, b as u32 as i32 as i64),
        Width::W64 => (a as i64, b as i64),
    };
    match c {
        Cond::Eq => a == b,
        Cond::Ne => a != b,
        Cond::LtS => sa < sb,
        Cond::LtU => a < b,
        Cond::GtS => sa > sb,
        Cond::GtU => a > b,
        Cond::LeS => sa <= sb,
        Cond::LeU => a <= b,
        Cond::GeS => sa >= sb,
        Cond::GeU => a >= b,
        _ => unreachable!(),
    }
}

pub fn convert(c: Conv, a: u64) -> Result<u64, TrapKind> {
    Ok(match c {
        Conv::WrapI64 => a as u32 as u64,
        Conv::ExtendI32S => a as u32 as i32 as i64 as u64,
        Conv::ExtendI32U => a as u32 as u64,
        Conv::TruncF64S => {
            let x = as_f64(a);
            if !(x > -2_147_483_649.0 && x < 2_147_483_648.0) {
                return Err(TrapKind::TruncError);
            }
            x as i32 as u32 as u64
        }
        Conv::ConvertI32SToF64 => f64_bits(a as u32 as i32 as f64),
    })
}

/// Evaluates a numeric instruction with one or two operands (`b` ignored for unary).
pub fn eval(n: Numeric, a: u64, b: u64) -> Result<u64, TrapKind> {
    match n {
        Numeric::Int(o, w) => int_op(o, w, a, b),
        Numeric::Float(o, w) => Ok(float_op(o, w, a, b)),
        Numeric::Cmp(c, w) => Ok(cond(c, w, a, b) as u64),
        Numeric::Eqz(w) => Ok((w.norm(a) == 0) as u64),
        Numeric::FUn(o, w) => Ok(float_unop(o, w, a)),
        Numeric::Conv(c) => convert(c, a),
    }
}

impl Numeric {
    pub fn arity(self) -> usize {
        match self {
            Numeric::Int(..) | Numeric::Float(..) | Numeric::Cmp(..) => 2,
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn div_traps() {
        assert_eq!(int_op(IntOp::DivS, Width::W32, 1, 0), Err(TrapKind::DivByZero));
        assert_eq!(int_op(IntOp::DivS, Width::W32, i32::MIN as u32 as u64, u32::MAX as u64), Err(TrapKind::IntegerOverflow));
        assert_eq!(int_op(IntOp::RemS, Width::W32, i32::MIN as u32 as u64, u32::MAX as u64), Ok(0));
        assert_eq!(int_op(IntOp::DivS, Width::W64, i64::MIN as u64, u64::MAX), Err(TrapKind::IntegerOverflow));
        assert_eq!(int_op(IntOp::RemU, Width::W64, 5, 0), Err(TrapKind::DivByZero));
    }

    #[test]
    fn trunc_range() {
        let t = |x: f64| convert(Conv::TruncF64S, x.to_bits());
        assert_eq!(t(-2147483648.9), Ok(i32::MIN as u32 as u64));
        assert_eq!(t(2147483647.9), Ok(i32::MAX as u64));
        assert_eq!(t(2147483648.0), Err(TrapKind::TruncError));
        assert_eq!(t(f64::NAN), Err(TrapKind::TruncError));
        assert_eq!(t(-2147483649.0), Err(TrapKind::TruncError));
    }

    #[test]
    fn nan_results_are_canonical() {
        let inf = f64::INFINITY.to_bits();
        assert_eq!(float_op(FloatOp::Sub, Width::W64, inf, inf), CANON_NAN64);
        let neg = (-1.0f32).to_bits() as u64;
        assert_eq!(float_unop(FUnOp::Sqrt, Width::W32, neg), CANON_NAN32 as u64);
    }

    #[test]
    fn classify_covers_plain_ops() {
        for opc in 0..=255u8 {
            let plain = crate::wasm::plain_sig(opc).is_some();
            assert_eq!(plain, classify(opc).is_some(), "opcode {opc:#x}");
        }
    }

    #[test]
    fn negated_float_conditions_with_nan() {
        let nan = f64::NAN.to_bits();
        let one = 1.0f64.to_bits();
        for c in [Cond::FEq, Cond::FNe, Cond::FLt, Cond::FGt, Cond::FLe, Cond::FGe] {
            assert_eq!(cond(c.negate(), Width::W64, nan, one), !cond(c, Width::W64, nan, one));
        }
    }

    proptest! {
        #[test]
        fn i32_ops_match_std(a in any::<i32>(), b in any::<i32>()) {
            let (x, y) = (a as u32 as u64, b as u32 as u64);
            prop_assert_eq!(int_op(IntOp::Add, Width::W32, x, y).unwrap(), a.wrapping_add(b) as u32 as u64);
            prop_assert_eq!(int_op(IntOp::Mul, Width::W32, x, y).unwrap(), a.wrapping_mul(b) as u32 as u64);
            prop_assert_eq!(int_op(IntOp::ShrS, Width::W32, x, y).unwrap(), (a >> (b & 31)) as u32 as u64);
            prop_assert_eq!(cond(Cond::LtS, Width::W32, x, y), a < b);
            prop_assert_eq!(cond(Cond::LtU, Width::W32, x, y), (a as u32) < (b as u32));
            if b != 0 && !(a == i32::MIN && b == -1) {
                prop_assert_eq!(int_op(IntOp::DivS, Width::W32, x, y).unwrap(), (a / b) as u32 as u64);
                prop_assert_eq!(int_op(IntOp::RemS, Width::W32, x, y).unwrap(), (a % b) as u32 as u64);
            }
        }

        #[test]
        fn cond_swap_and_negate(a in any::<i64>(), b in any::<i64>(), fa in any::<f64>(), fb in any::<f64>()) {
            use Cond::*;
            for c in [Eq, Ne, LtS, LtU, GtS, GtU, LeS, LeU, GeS, GeU] {
                let (x, y) = (a as u64, b as u64);
                prop_assert_eq!(cond(c, Width::W64, x, y), cond(c.swap(), Width::W64, y, x));
                prop_assert_eq!(cond(c, Width::W64, x, y), !cond(c.negate(), Width::W64, x, y));
            }
            for c in [FEq, FNe, FLt, FGt, FLe, FGe] {
                let (x, y) = (fa.to_bits(), fb.to_bits());
                prop_assert_eq!(cond(c, Width::W64, x, y), cond(c.swap(), Width::W64, y, x));
                prop_assert_eq!(cond(c, Width::W64, x, y), !cond(c.negate(), Width::W64, x, y));
            }
        }

        #[test]
        fn sqrt_matches_std(bits in any::<u64>(), bits32 in any::<u32>()) {
            let x = f64::from_bits(bits);
            prop_assert_eq!(float_unop(FUnOp::Sqrt, Width::W64, bits), f64_bits(x.sqrt()));
            let y = f32::from_bits(bits32);
            prop_assert_eq!(float_unop(FUnOp::Sqrt, Width::W32, bits32 as u64), f32_bits(y.sqrt()));
        }
    }
}
