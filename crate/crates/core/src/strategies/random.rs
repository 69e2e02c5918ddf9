use super::{Context, Proposal, Strategy, StrategyError};

/// Uniform draws from the feasible space, ignoring history.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomSearch;

impl Strategy for RandomSearch {
    fn name(&self) -> &str {
        "random"
    }

    fn propose(&mut self, ctx: &mut Context<'_>) -> Result<Proposal, StrategyError> {
        Ok(Proposal::new(ctx.space.sample(ctx.rng, ctx.batch)?))
    }
}
