/// Bit 6, the most significant magnitude bit of a signed byte.
const INTEGER_MSB: u8 = 0x40;

/// Lightweight correction over the two replicas of a split neuron: bitwise AND
/// of both outputs, then bit 6 cleared.
///
/// Fault-free replicas are equal and lie in `[0, 63]`, so the result is the
/// replica value. A 0-to-1 flip in one replica is masked by the AND (or by
/// the bit reset for bit 6); a 1-to-0 flip can only lower the value.
pub fn lcu_correct(y1: i8, y2: i8) -> i8 {
    ((y1 as u8 & y2 as u8) & !INTEGER_MSB) as i8
}

/// Bitwise two-out-of-three majority.
pub fn tmr_vote(y1: i8, y2: i8, y3: i8) -> i8 {
    let (a, b, c) = (y1 as u8, y2 as u8, y3 as u8);
    ((a & b) | (a & c) | (b & c)) as i8
}
