use bpfsynth_core::isa::{decode, encode, parse_asm, print_asm, Instruction, Opcode};
use bpfsynth_core::{AluOp, JmpCond, Program, Reg, Size, Src};
use proptest::prelude::*;

fn reg() -> impl Strategy<Value = Reg> {
    (0u8..=10).prop_map(|r| Reg::new(r).unwrap())
}

fn writable() -> impl Strategy<Value = Reg> {
    (0u8..=9).prop_map(|r| Reg::new(r).unwrap())
}

fn opcode() -> impl Strategy<Value = Opcode> {
    let alu = (prop::sample::select(AluOp::ALL.to_vec()), any::<bool>(), any::<bool>()).prop_map(|(op, w, r)| {
        let src = if r { Src::Reg } else { Src::Imm };
        if w { Opcode::Alu64(op, src) } else { Opcode::Alu32(op, src) }
    });
    let jmp = (prop::sample::select(JmpCond::ALL.to_vec()), any::<bool>())
        .prop_map(|(c, r)| Opcode::Jmp(c, if r { Src::Reg } else { Src::Imm }));
    let size = prop::sample::select(Size::ALL.to_vec());
    prop_oneof![
        4 => alu,
        2 => jmp,
        1 => size.clone().prop_map(Opcode::Ldx),
        1 => size.clone().prop_map(Opcode::Stx),
        1 => size.prop_map(Opcode::St),
        1 => Just(Opcode::Xadd32),
        1 => Just(Opcode::Xadd64),
        1 => Just(Opcode::Lddw),
        1 => Just(Opcode::LdMapFd),
        1 => Just(Opcode::Call),
        1 => Just(Opcode::Exit),
        1 => Just(Opcode::Nop),
    ]
}

fn instruction() -> impl Strategy<Value = (Opcode, Reg, Reg, Reg, i16, i64, i32)> {
    (opcode(), writable(), reg(), reg(), any::<i16>(), any::<i64>(), any::<i32>())
}

fn program() -> impl Strategy<Value = Program> {
    prop::collection::vec(instruction(), 1..24).prop_map(|raw| {
        let n = raw.len() as i64;
        let insns = raw
            .into_iter()
            .enumerate()
            .map(|(i, (op, wdst, dst, src, off, imm64, imm32))| {
                let imm = match op {
                    Opcode::Lddw => imm64,
                    Opcode::LdMapFd | Opcode::Call => (imm32 & 0x7fff_ffff) as i64,
                    _ => imm32 as i64,
                };
                let dst = if op.writes_dst() { wdst } else { dst };
                let off = if op.is_jump() { ((off as i64).rem_euclid(n) - i as i64 - 1) as i16 } else { off };
                Instruction::new(op, dst, src, off, imm)
            })
            .collect();
        Program::new(insns)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn binary_round_trip(p in program()) {
        prop_assert!(p.validate().is_ok());
        prop_assert_eq!(decode(&encode(&p)).unwrap(), p);
    }

    #[test]
    fn text_round_trip(p in program()) {
        prop_assert_eq!(parse_asm(&print_asm(&p)).unwrap(), p);
    }

    #[test]
    fn encoding_length_counts_wide_loads(p in program()) {
        let slots: usize = p.insns.iter().map(Instruction::slots).sum();
        prop_assert_eq!(encode(&p).len(), slots * 8);
    }
}

#[test]
fn kernel_style_listing_parses() {
    let src = "
        bpf_mov r1 0          // zero
        bpf_stx_32 r10 -4 r1
        bpf_stx_32 r10 -8 r1
        bpf_ld_map_fd r1 0
        bpf_mov64 r2 r10
        bpf_add64 r2 -8
        bpf_call map_lookup_elem
        bpf_jeq r0 0 2
        bpf_mov64 r1 1
        bpf_xadd_64 r0 0 r1
        bpf_mov64 r0 2
        bpf_exit
    ";
    let p = parse_asm(src).unwrap();
    assert_eq!(p.len(), 12);
    assert_eq!(p.instruction_count(), 13);
    assert_eq!(p.insns[6], Instruction::call(1));
}
