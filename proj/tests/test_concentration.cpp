#include "support.hpp"

#include <introsim/concentration.hpp>

#include <gtest/gtest.h>

#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

using namespace introsim;
using introsim::testing::make_relay;

namespace {

Relay with_probs(Relay r, double gp, double mp) {
  r.guard_probability = gp;
  r.middle_probability = mp;
  return r;
}

nlohmann::json fixture_json() {
  std::ifstream in(std::string(INTROSIM_FIXTURE_DIR) + "/consensus_100.json");
  return nlohmann::json::parse(in);
}

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST(JurisdictionMass, ThreeRelayExample) {
  const RelaySnapshot snap({make_relay("A", 500, true, "US"), make_relay("B", 200, true, "DE"),
                            make_relay("C", 300, true, "RU")});
  EXPECT_NEAR(jurisdiction_mass(snap, JurisdictionSet::fourteen_eyes(), Role::guard), 0.7, 1e-12);
  EXPECT_NEAR(jurisdiction_mass(snap, JurisdictionSet::five_eyes(), Role::guard), 0.5, 1e-12);
}

TEST(JurisdictionMass, UsesProbabilityFieldsAsGiven) {
  const RelaySnapshot snap({with_probs(make_relay("A", 10, true, "US"), 0.3, 0.1),
                            with_probs(make_relay("B", 10, true, "RU"), 0.6, 0.8)});
  // The fields need not sum to one; they are read as absolute probabilities.
  EXPECT_NEAR(jurisdiction_mass(snap, JurisdictionSet::five_eyes(), Role::guard), 0.3, 1e-12);
  EXPECT_NEAR(jurisdiction_mass(snap, JurisdictionSet::five_eyes(), Role::middle), 0.1, 1e-12);
}

TEST(AllHopsIntro, Examples) {
  EXPECT_NEAR(all_hops_intro_probability(0.7706, 0.7707), 0.353, 0.001);
  EXPECT_DOUBLE_EQ(all_hops_intro_probability(1.0, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(all_hops_intro_probability(0.5, 0.5), 0.0625);
  EXPECT_DOUBLE_EQ(all_hops_intro_probability(0.0, 0.9), 0.0);
  EXPECT_THROW(all_hops_intro_probability(1.1, 0.5), ValidationError);
  EXPECT_THROW(all_hops_intro_probability(0.5, -0.01), ValidationError);
}

TEST(ConcentrationReport, SingleCountrySnapshot) {
  const RelaySnapshot snap({make_relay("A", 100, true, "US"), make_relay("B", 300, true, "US"),
                            make_relay("C", 50, false, "US")});
  const auto r = concentration_report(snap, JurisdictionSet::five_eyes());
  EXPECT_DOUBLE_EQ(r.p_guard, 1.0);
  EXPECT_DOUBLE_EQ(r.p_middle, 1.0);
  EXPECT_DOUBLE_EQ(r.p_all_hops_intro, 1.0);
  EXPECT_EQ(r.relays_inside, 3u);
  EXPECT_EQ(r.relays_outside, 0u);
}

TEST(ConcentrationReport, MatchesSnapshotAtConsensusLevel) {
  // Built so the in-set masses are 0.7706 (guard) and 0.7707 (middle).
  const RelaySnapshot snap({with_probs(make_relay("A", 10, true, "US"), 0.5, 0.5),
                            with_probs(make_relay("B", 10, true, "DE"), 0.2706, 0.2707),
                            with_probs(make_relay("C", 10, true, "RU"), 0.2294, 0.2293)});
  const auto r = concentration_report(snap, JurisdictionSet::fourteen_eyes());
  EXPECT_NEAR(r.p_guard, 0.7706, 1e-12);
  EXPECT_NEAR(r.p_middle, 0.7707, 1e-12);
  EXPECT_NEAR(r.p_all_hops_intro, 0.3528, 0.0005);
}

TEST(ConcentrationReport, FixtureCountsMatchRawScan) {
  const auto doc = fixture_json();
  const RelaySnapshot snap = parse_consensus(doc);
  const auto fourteen = JurisdictionSet::fourteen_eyes();
  std::size_t inside = 0;
  double guard = 0, middle = 0;
  for (const auto& rec : doc) {
    std::string cc = rec.value("country", std::string("??"));
    for (char& ch : cc) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    if (!fourteen.countries.contains(cc)) continue;
    ++inside;
    guard += rec.value("guard_probability", 0.0);
    middle += rec.value("middle_probability", 0.0);
  }
  const auto r = concentration_report(snap, fourteen);
  EXPECT_EQ(r.relays_inside, inside);
  EXPECT_EQ(r.relays_inside + r.relays_outside, 100u);
  EXPECT_NEAR(r.p_guard, guard, 1e-9);
  EXPECT_NEAR(r.p_middle, middle, 1e-9);
  EXPECT_NEAR(r.p_all_hops_intro, guard * middle * middle * middle, 1e-12);
}

TEST(ConcentrationReport, UnknownCountryNeverCounts) {
  JurisdictionSet odd{"odd", {"??", "US"}};
  const RelaySnapshot snap({make_relay("A", 100, true, "??"), make_relay("B", 100, true, "US")});
  const auto r = concentration_report(snap, odd);
  EXPECT_NEAR(r.p_guard, 0.5, 1e-12);
  EXPECT_EQ(r.relays_inside, 1u);
}

TEST(ConcentrationProperty, DisjointSetsAdd) {
  Rng gen(61);
  const JurisdictionSet a{"a", {"US", "NL"}}, b{"b", {"DE", "FR"}}, ab{"ab", {"US", "NL", "DE", "FR"}};
  for (int c = 0; c < 300; ++c) {
    const RelaySnapshot s = introsim::testing::random_snapshot(gen);
    for (Role role : {Role::guard, Role::middle}) {
      EXPECT_NEAR(jurisdiction_mass(s, ab, role), jurisdiction_mass(s, a, role) + jurisdiction_mass(s, b, role), 1e-12)
          << "case " << c;
    }
  }
}

TEST(ConcentrationProperty, NestedSetsAreMonotone) {
  Rng gen(62);
  for (int c = 0; c < 300; ++c) {
    const RelaySnapshot s = introsim::testing::random_snapshot(gen);
    const auto r5 = concentration_report(s, JurisdictionSet::five_eyes());
    const auto r9 = concentration_report(s, JurisdictionSet::nine_eyes());
    const auto r14 = concentration_report(s, JurisdictionSet::fourteen_eyes());
    EXPECT_LE(r5.p_guard, r9.p_guard + 1e-12);
    EXPECT_LE(r9.p_guard, r14.p_guard + 1e-12);
    EXPECT_LE(r5.p_middle, r9.p_middle + 1e-12);
    EXPECT_LE(r9.p_middle, r14.p_middle + 1e-12);
    EXPECT_LE(r5.p_all_hops_intro, r14.p_all_hops_intro + 1e-12);
    EXPECT_NEAR(r14.p_all_hops_intro, r14.p_guard * std::pow(r14.p_middle, 3), 1e-12);
    EXPECT_GE(r14.p_all_hops_intro, 0.0);
    EXPECT_LE(r14.p_all_hops_intro, 1.0);
  }
}

TEST(SampledAllHops, MatchesExactDrawWithoutReplacement) {
  // 200 equal-weight guards, half inside the set: the four distinct hops all
  // land inside with probability (100/200)(99/199)(98/198)(97/197).
  std::vector<Relay> relays;
  for (int i = 0; i < 200; ++i)
    relays.push_back(make_relay("S" + std::to_string(i), 1000, true, i % 2 ? "US" : "RU"));
  const RelaySnapshot snap(std::move(relays));
  const double exact = (100.0 / 200) * (99.0 / 199) * (98.0 / 198) * (97.0 / 197);
  Rng rng(63);
  const std::size_t n = 40000;
  const double got = sampled_all_hops_intro_probability(snap, JurisdictionSet::five_eyes(), n, rng);
  EXPECT_NEAR(got, exact, 4 * std::sqrt(exact * (1 - exact) / n));
  // The with-replacement closed form overstates it slightly.
  EXPECT_GT(all_hops_intro_probability(0.5, 0.5), exact);
}

TEST(DistributionReport, HeaderRowsAndMassSums) {
  const RelaySnapshot snap({make_relay("A", 500, true, "US"), make_relay("B", 200, true, "DE"),
                            make_relay("C", 300, false, "RU"), make_relay("D", 100, true, "??")});
  const auto rows = csv_rows(emit_distribution_report(snap));
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"country", "relay_count", "guard_mass", "middle_mass",
                                               "in_fourteen_eyes"}));
  double g = 0, m = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    g += std::stod(rows[i][2]);
    m += std::stod(rows[i][3]);
    const bool in = rows[i][0] == "US" || rows[i][0] == "DE";
    EXPECT_EQ(rows[i][4], in ? "1" : "0") << rows[i][0];
  }
  EXPECT_NEAR(g, 1.0, 1e-5);
  EXPECT_NEAR(m, 1.0, 1e-5);
}

TEST(SetSummary, OneRowPerSet) {
  const RelaySnapshot snap = parse_consensus(fixture_json());
  const auto rows = csv_rows(emit_set_summary(
      snap, {JurisdictionSet::five_eyes(), JurisdictionSet::nine_eyes(), JurisdictionSet::fourteen_eyes()}));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0][0], "set");
  EXPECT_EQ(rows[1][0], "five_eyes");
  EXPECT_EQ(rows[3][0], "fourteen_eyes");
  EXPECT_EQ(std::stoul(rows[3][4]) + std::stoul(rows[3][5]), 100u);
  EXPECT_FALSE(JurisdictionSet::builtin("seven_eyes"));
}
