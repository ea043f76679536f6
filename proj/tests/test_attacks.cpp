#include <doctest.h>

#include <random>
#include <vector>

#include "specderef/attacks.hpp"
#include "specderef/errors.hpp"
#include "specderef/gadget_presets.hpp"
#include "specderef/scenario.hpp"

using namespace specderef;

namespace {

SimConfig attack_config() {
  SimConfig cfg;
  cfg.mitigations.spectre_btb = false;
  cfg.mitigations.register_clearing_on_syscall = false;
  cfg.mitigations.register_clearing_on_vmexit = false;
  cfg.mitigations.l1d_flush_on_vmentry = L1dFlushPolicy::None;
  return cfg;
}

SimConfig trap_config() {
  SimConfig cfg = attack_config();
  cfg.mitigations.smap = false;  // the trap mappings are user pages
  return cfg;
}

struct TrapFixture {
  MachineState m;
  PhysicalAddress p1{0x3000};
  PhysicalAddress p2{0x9000};
  TypeConfusionSite site;

  explicit TrapFixture(SimConfig cfg = trap_config()) : m(cfg) {
    m.add_process(1);
    m.map_page(1, VirtualAddress{0x7770000000}, PhysicalAddress{0xB000}, true);
    site = install_type_confusion_site(m, 1, VirtualAddress{0x7770000000});
  }

  TrapOutcome run(std::uint32_t secret) {
    return dereference_trap(m, 1, p1, p2, make_type_confusion_gadget(site, secret));
  }
};

// Brute-force round-schedule oracle: for each round, derive which page and
// line the dereference must hit straight from the mapping rule, never from
// the attack code.
struct OracleRound {
  bool second_page;
  std::uint32_t line;
  std::uint64_t region_first_page;
  std::uint64_t region_pages;
};

std::vector<OracleRound> trap_oracle_schedule(std::uint32_t secret) {
  std::vector<OracleRound> rounds;
  const std::uint64_t secret_page = secret / kPageSize;
  std::uint64_t first_page = 0;
  std::uint64_t pages = std::uint64_t{1} << 20;
  for (int round = 0; round < 20; ++round) {
    const std::uint64_t half = pages / 2;
    // Pages [first, first+half) map to p1, the rest to p2.
    const bool second = secret_page >= first_page + half;
    rounds.push_back(OracleRound{second, static_cast<std::uint32_t>((secret % kPageSize) / 64),
                                 first_page, pages});
    first_page += second ? half : 0;
    pages = half;
  }
  return rounds;
}

std::uint32_t trap_oracle_value(std::uint32_t secret) {
  const auto schedule = trap_oracle_schedule(secret);
  std::uint32_t value = 0;
  if (schedule[0].second_page) value |= 1u << 31;
  value |= schedule[0].line << 6;
  for (int round = 1; round < 20; ++round) {
    if (schedule[round].second_page) {
      value |= 1u << (31 - round);
    }
  }
  return value;
}

}  // namespace

TEST_CASE("trap oracle agrees with plain mask arithmetic") {
  std::mt19937_64 rng(31337);
  for (int i = 0; i < 2000; ++i) {
    const std::uint32_t secret = static_cast<std::uint32_t>(rng());
    REQUIRE(trap_oracle_value(secret) == (secret & ~0x3Fu));
  }
  CHECK(trap_oracle_value(0x0000007F) == 0x00000040);
  CHECK(trap_oracle_value(0) == 0);
  CHECK(trap_oracle_value(0x12300000) == 0x12300000);
}

TEST_CASE("address translation attack recovers the planted frame") {
  MachineState m(attack_config());
  m.add_process(1);
  const VirtualAddress v{0x40000};
  const PhysicalAddress planted{0x5E000};
  m.map_page(1, v, planted, true);
  const SyscallGadgetSequence seq = default_gadget_sequence(m);
  const std::uint64_t frames = m.sim_config().physical_memory_size / kPageSize;

  SUBCASE("full guess range finds the frame") {
    const auto result = address_translation_attack(m, 1, v, FrameRange{0, frames}, seq);
    REQUIRE(result.has_value());
    CHECK(*result == planted);
  }

  SUBCASE("offsets within the page are preserved") {
    const VirtualAddress inner{v.value + 0x7C0};
    const auto result = address_translation_attack(m, 1, inner, FrameRange{0, frames}, seq);
    REQUIRE(result.has_value());
    CHECK(result->value == planted.value + 0x7C0);
  }

  SUBCASE("a range excluding the frame finds nothing") {
    const auto result = address_translation_attack(m, 1, v, FrameRange{0, 0x20}, seq);
    CHECK_FALSE(result.has_value());
  }

  SUBCASE("an unmapped probe address is rejected") {
    CHECK_THROWS_AS(
        address_translation_attack(m, 1, VirtualAddress{0xFF0000}, FrameRange{0, frames}, seq),
        ConfigError);
  }

  SUBCASE("retpoline kills the attack over the full range") {
    SimConfig cfg = attack_config();
    cfg.mitigations.spectre_btb = true;
    MachineState m2(cfg);
    m2.add_process(1);
    m2.map_page(1, v, planted, true);
    CHECK_FALSE(
        address_translation_attack(m2, 1, v, FrameRange{0, frames}, seq).has_value());
  }

  SUBCASE("the interrupt path works as the trigger too") {
    const SyscallGadgetSequence irq = default_gadget_sequence(m, TriggerKind::Interrupt);
    const auto result = address_translation_attack(m, 1, v, FrameRange{0, frames}, irq);
    REQUIRE(result.has_value());
    CHECK(*result == planted);
  }
}

TEST_CASE("covert channel moves single bits") {
  MachineState m(attack_config());
  m.add_process(1);
  const VirtualAddress v{0x40000};
  const PhysicalAddress page{0x5000};
  m.map_page(1, v, page, true);
  CovertChannel chan = covert_channel_setup(m, 1, v, page, 4 * m.probe_round_trip(), 0);

  SUBCASE("a 1 arrives as a 1, a 0 as a 0") {
    covert_send(m, chan, true);
    CHECK(covert_receive(m, chan));
    covert_send(m, chan, false);
    CHECK_FALSE(covert_receive(m, chan));
    covert_send(m, chan, true);
    CHECK(covert_receive(m, chan));
  }

  SUBCASE("retpoline kills the channel") {
    SimConfig cfg = attack_config();
    cfg.mitigations.spectre_btb = true;
    MachineState m2(cfg);
    m2.add_process(1);
    m2.map_page(1, v, page, true);
    CovertChannel dead = covert_channel_setup(m2, 1, v, page, 4 * m2.probe_round_trip(), 0);
    covert_send(m2, dead, true);
    CHECK_FALSE(covert_receive(m2, dead));
  }

  SUBCASE("a non-zero line index works") {
    CovertChannel offset_chan = covert_channel_setup(m, 1, v, page, 4 * m.probe_round_trip(), 17);
    covert_send(m, offset_chan, true);
    CHECK(covert_receive(m, offset_chan));
  }

  SUBCASE("window below one probe round-trip is a configuration error") {
    CHECK_THROWS_AS(covert_channel_setup(m, 1, v, page, m.probe_round_trip() - 1, 0),
                    ConfigError);
  }

  SUBCASE("line index beyond the page is a configuration error") {
    CHECK_THROWS_AS(covert_channel_setup(m, 1, v, page, 4 * m.probe_round_trip(), 64),
                    ConfigError);
  }
}

TEST_CASE("covert channel round-trips random payloads up to 1 KiB") {
  std::mt19937_64 rng(55);
  for (const std::size_t size : {std::size_t{1}, std::size_t{16}, std::size_t{1024}}) {
    MachineState m(attack_config());
    m.add_process(1);
    const VirtualAddress v{0x40000};
    const PhysicalAddress page{0x5000};
    m.map_page(1, v, page, true);
    CovertChannel chan = covert_channel_setup(m, 1, v, page, 4 * m.probe_round_trip(), 0);

    std::vector<std::uint8_t> message(size);
    for (auto& b : message) b = static_cast<std::uint8_t>(rng());
    std::vector<std::uint8_t> decoded(size, 0);
    for (std::size_t i = 0; i < size; ++i) {
      for (int bit = 7; bit >= 0; --bit) {
        covert_send(m, chan, (message[i] >> bit) & 1);
        if (covert_receive(m, chan)) {
          decoded[i] |= static_cast<std::uint8_t>(1u << bit);
        }
      }
    }
    REQUIRE(decoded == message);
  }
}

TEST_CASE("covert benchmark") {
  MachineState m(attack_config());
  m.add_process(1);
  const VirtualAddress v{0x40000};
  const PhysicalAddress page{0x5000};
  m.map_page(1, v, page, true);
  CovertChannel chan = covert_channel_setup(m, 1, v, page, 4 * m.probe_round_trip(), 0);

  SUBCASE("noiseless transmission is error-free") {
    std::vector<std::uint8_t> message(32);
    std::mt19937_64 rng(9);
    for (auto& b : message) b = static_cast<std::uint8_t>(rng());
    const CovertBenchmarkResult res = covert_benchmark(m, chan, message, 3);
    CHECK(res.bits_transmitted == 32 * 8 * 3);
    CHECK(res.bit_errors == 0);
    CHECK(res.error_rate == 0.0);
    CHECK(res.bits_per_kilocycle > 0.0);
  }

  SUBCASE("empty message transmits zero bits with zero errors") {
    const CovertBenchmarkResult res = covert_benchmark(m, chan, {}, 5);
    CHECK(res.bits_transmitted == 0);
    CHECK(res.error_rate == 0.0);
  }
}

TEST_CASE("speculative type confusion") {
  MachineState m(trap_config());
  m.add_process(1);
  const VirtualAddress dummy_data{0x7770000000};
  m.map_page(1, dummy_data, PhysicalAddress{0xB000}, true);
  TypeConfusionSite site = install_type_confusion_site(m, 1, dummy_data);

  const PhysicalAddress secret_page{0x3000};
  m.map_page(1, VirtualAddress{0x12000}, secret_page, true);
  const std::uint32_t secret = 0x12040;  // falls on line 1 of the mapped page

  SUBCASE("training Dummy then calling Secret dereferences the secret") {
    call_virtual(m, site, ObjectKind::Dummy, site.dummy_member);
    m.cache().flush(PhysicalAddress{0x3040});
    call_virtual(m, site, ObjectKind::Secret, secret);
    CHECK(m.cache().contains(CacheLevel::L1, PhysicalAddress{0x3040}));
  }

  SUBCASE("without training there is no speculative fill") {
    call_virtual(m, site, ObjectKind::Secret, secret);
    CHECK(m.counters().speculative_fills == 0);
  }

  SUBCASE("a correctly predicted call does not dereference") {
    call_virtual(m, site, ObjectKind::Secret, secret);
    call_virtual(m, site, ObjectKind::Secret, secret);
    CHECK(m.counters().speculative_fills == 0);
  }

  SUBCASE("the architectural Dummy call dereferences only its own member") {
    call_virtual(m, site, ObjectKind::Dummy, site.dummy_member);
    CHECK(m.cache().contains(CacheLevel::L1, PhysicalAddress{0xB000}));
    CHECK(m.counters().speculative_fills == 0);
  }
}

TEST_CASE("dereference trap recovers bits 6..31") {
  SUBCASE("the classic constant") {
    TrapFixture fx;
    const TrapOutcome out = fx.run(0x12300000);
    REQUIRE(out.success);
    CHECK(out.recovered == 0x12300000);
    CHECK(out.rounds == 20);
    CHECK(out.probes == 20 * 128);
  }

  SUBCASE("low six bits are lost") {
    TrapFixture fx;
    const TrapOutcome out = fx.run(0x0000007F);
    REQUIRE(out.success);
    CHECK(out.recovered == 0x00000040);
  }

  SUBCASE("zero recovers zero") {
    TrapFixture fx;
    const TrapOutcome out = fx.run(0);
    REQUIRE(out.success);
    CHECK(out.recovered == 0);
  }

  SUBCASE("random secrets match the oracle, schedule for schedule") {
    std::mt19937_64 rng(4242);
    for (int i = 0; i < 25; ++i) {
      const std::uint32_t secret = static_cast<std::uint32_t>(rng());
      TrapFixture fx;
      const TrapOutcome out = fx.run(secret);
      REQUIRE(out.success);
      REQUIRE(out.recovered == trap_oracle_value(secret));
      REQUIRE(out.recovered == (secret & ~0x3Fu));
      const auto expected = trap_oracle_schedule(secret);
      REQUIRE(out.schedule.size() == expected.size());
      for (std::size_t round = 0; round < expected.size(); ++round) {
        REQUIRE(out.schedule[round].hit_second_page == expected[round].second_page);
        REQUIRE(out.schedule[round].line == expected[round].line);
      }
    }
  }

  SUBCASE("retpoline defeats the trap with a diagnostic") {
    SimConfig cfg = trap_config();
    cfg.mitigations.spectre_btb = true;
    TrapFixture fx(cfg);
    const TrapOutcome out = fx.run(0x12300000);
    CHECK_FALSE(out.success);
    CHECK(out.diagnostic.find("gadget inactive") != std::string::npos);
    CHECK(out.rounds == 1);
  }

  SUBCASE("SMAP defeats the trap") {
    SimConfig cfg = trap_config();
    cfg.mitigations.smap = true;
    TrapFixture fx(cfg);
    CHECK_FALSE(fx.run(0x12300000).success);
  }
}

TEST_CASE("foreshadow-l3 from a guest") {
  const auto make = [](L1dFlushPolicy policy, bool spectre, bool l1tf) {
    SimConfig cfg = attack_config();
    cfg.mitigations.l1d_flush_on_vmentry = policy;
    cfg.mitigations.spectre_btb = spectre;
    cfg.mitigations.l1tf_vulnerable = l1tf;
    MachineState m(cfg);
    m.add_process(2, /*is_vm=*/true);
    return m;
  };
  const PhysicalAddress secret_p{0x5E000};
  std::vector<std::uint8_t> secret(64);
  for (std::size_t i = 0; i < secret.size(); ++i) secret[i] = static_cast<std::uint8_t>(i ^ 0xA5);

  SUBCASE("conditional flush and no retpoline leaks the whole line") {
    MachineState m = make(L1dFlushPolicy::Conditional, false, true);
    m.plant_bytes(secret_p, secret);
    const ForeshadowResult res = foreshadow_l3_attack(m, 2, secret_p, secret.size());
    for (std::size_t i = 0; i < secret.size(); ++i) {
      REQUIRE(res.bytes[i] == secret[i]);
    }
  }

  SUBCASE("retpoline yields zero bytes") {
    MachineState m = make(L1dFlushPolicy::Conditional, true, true);
    m.plant_bytes(secret_p, secret);
    const ForeshadowResult res = foreshadow_l3_attack(m, 2, secret_p, secret.size());
    for (const auto& b : res.bytes) REQUIRE_FALSE(b.has_value());
  }

  SUBCASE("always-flush yields zero bytes") {
    MachineState m = make(L1dFlushPolicy::Always, false, true);
    m.plant_bytes(secret_p, secret);
    const ForeshadowResult res = foreshadow_l3_attack(m, 2, secret_p, secret.size());
    for (const auto& b : res.bytes) REQUIRE_FALSE(b.has_value());
  }

  SUBCASE("multi-line secrets report per-line gaps honestly") {
    MachineState m = make(L1dFlushPolicy::Conditional, false, true);
    std::vector<std::uint8_t> big(160);
    for (std::size_t i = 0; i < big.size(); ++i) big[i] = static_cast<std::uint8_t>(i);
    m.plant_bytes(secret_p, big);
    const ForeshadowResult res = foreshadow_l3_attack(m, 2, secret_p, big.size());
    std::size_t recovered = 0;
    for (std::size_t i = 0; i < big.size(); ++i) {
      if (res.bytes[i] && *res.bytes[i] == big[i]) ++recovered;
    }
    CHECK(recovered == big.size());
    CHECK(bytes_to_hex(std::span<const std::optional<std::uint8_t>>(res.bytes)).size() ==
          big.size() * 2);
  }
}

TEST_CASE("meltdown-l3 re-attribution") {
  const auto make = [](bool vulnerable, bool spectre, bool kaiser) {
    SimConfig cfg = attack_config();
    cfg.mitigations.meltdown_us_vulnerable = vulnerable;
    cfg.mitigations.spectre_btb = spectre;
    cfg.mitigations.kaiser = kaiser;
    MachineState m(cfg);
    m.add_process(1);
    return m;
  };
  const PhysicalAddress secret_p{0x77000};

  for (const bool kaiser : {false, true}) {
    CAPTURE(kaiser);
    MachineState m = make(true, false, kaiser);
    m.plant_byte(secret_p, 0x42);
    const SyscallGadgetSequence seq = default_gadget_sequence(m);
    CHECK_FALSE(meltdown_l3_experiment(m, 1, secret_p, 0x42, false, seq));
    CHECK(meltdown_l3_experiment(m, 1, secret_p, 0x42, true, seq));
  }

  SUBCASE("retpoline breaks the gadget-assisted read") {
    MachineState m = make(true, true, true);
    m.plant_byte(secret_p, 0x42);
    const SyscallGadgetSequence seq = default_gadget_sequence(m);
    CHECK_FALSE(meltdown_l3_experiment(m, 1, secret_p, 0x42, true, seq));
  }

  SUBCASE("a secret already in L1 leaks without any gadget") {
    MachineState m = make(true, true, true);
    m.plant_byte(secret_p, 0x42);
    m.cache().access(secret_p);
    const SyscallGadgetSequence seq = default_gadget_sequence(m);
    CHECK(meltdown_l3_experiment(m, 1, secret_p, 0x42, false, seq));
  }

  SUBCASE("patched silicon never returns the secret") {
    MachineState m = make(false, false, true);
    m.plant_byte(secret_p, 0x42);
    const SyscallGadgetSequence seq = default_gadget_sequence(m);
    CHECK_FALSE(meltdown_l3_experiment(m, 1, secret_p, 0x42, true, seq));
  }
}

TEST_CASE("enabling any single mitigation never revives a failing attack") {
  // For each attack: run the baseline, then flip each mitigation on
  // individually and require success never goes false -> true.
  struct Flip {
    const char* name;
    void (*apply)(MitigationConfig&);
  };
  const Flip flips[] = {
      {"spectre_btb", [](MitigationConfig& m) { m.spectre_btb = true; }},
      {"kaiser", [](MitigationConfig& m) { m.kaiser = true; }},
      {"smap", [](MitigationConfig& m) { m.smap = true; }},
      {"register_clearing_on_syscall",
       [](MitigationConfig& m) { m.register_clearing_on_syscall = true; }},
      {"register_clearing_on_vmexit",
       [](MitigationConfig& m) { m.register_clearing_on_vmexit = true; }},
      {"l1d_always", [](MitigationConfig& m) { m.l1d_flush_on_vmentry = L1dFlushPolicy::Always; }},
      {"in_order", [](MitigationConfig& m) { m.cpu_order = CpuOrder::InOrder; }},
  };

  const auto attack_succeeds = [](const SimConfig& cfg, int which) {
    switch (which) {
      case 0: {  // address translation
        MachineState m(cfg);
        m.add_process(1);
        m.map_page(1, VirtualAddress{0x40000}, PhysicalAddress{0x5E000}, true);
        const auto r = address_translation_attack(m, 1, VirtualAddress{0x40000},
                                                  FrameRange{0x50, 32},
                                                  default_gadget_sequence(m));
        return r.has_value();
      }
      case 1: {  // dereference trap
        SimConfig trap_cfg = cfg;
        MachineState m(trap_cfg);
        m.add_process(1);
        m.map_page(1, VirtualAddress{0x7770000000}, PhysicalAddress{0xB000}, true);
        TypeConfusionSite site =
            install_type_confusion_site(m, 1, VirtualAddress{0x7770000000});
        return dereference_trap(m, 1, PhysicalAddress{0x3000}, PhysicalAddress{0x9000},
                                make_type_confusion_gadget(site, 0x12300000))
            .success;
      }
      default: {  // foreshadow-l3
        MachineState m(cfg);
        m.add_process(2, true);
        const PhysicalAddress secret_p{0x5E000};
        m.plant_byte(secret_p, 0x42);
        const ForeshadowResult res = foreshadow_l3_attack(m, 2, secret_p, 1);
        return res.bytes[0].has_value();
      }
    }
  };

  for (int attack = 0; attack < 3; ++attack) {
    SimConfig baseline = trap_config();
    baseline.mitigations.l1tf_vulnerable = true;
    baseline.mitigations.meltdown_us_vulnerable = true;
    REQUIRE(attack_succeeds(baseline, attack));

    for (std::size_t i = 0; i < std::size(flips); ++i) {
      SimConfig one = baseline;
      flips[i].apply(one.mitigations);
      const bool one_succeeds = attack_succeeds(one, attack);
      for (std::size_t j = 0; j < std::size(flips); ++j) {
        if (j == i) continue;
        SimConfig two = one;
        flips[j].apply(two.mitigations);
        const bool two_succeeds = attack_succeeds(two, attack);
        CAPTURE(attack);
        CAPTURE(flips[i].name);
        CAPTURE(flips[j].name);
        // Adding a mitigation can only remove success, never create it.
        REQUIRE((!two_succeeds || one_succeeds));
      }
    }
  }
}
